from gfrrn.network.network import (GFRRN, AttentionKind, DecoderLevel,
                                  DualDomainInteractionBlock,
                                  DualStreamEncoder, DualStreamFFN,
                                  GFRRNOutput, LayerNorm2d, ModelConfig,
                                  ResidualEstimator, SimpleGate, StreamPair,
                                  build_attention_pair,
                                  zero_init_residual_branches)
