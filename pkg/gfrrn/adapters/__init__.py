from gfrrn.adapters.adapters import (BACKBONE_PREFIX, Mlp, MonaLayer,
                                    MonaSwinBlock, MonaSwinEncoder,
                                    ParamEntry, ParamGroup, ParamStore,
                                    PatchEmbed, PatchMerging, TuningMode,
                                    backbone_hash, default_group_tagger,
                                    load_backbone_weights, token_grid,
                                    trainable_parameter_filter)
