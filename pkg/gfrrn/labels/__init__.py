from gfrrn.labels.labels import (LabelMode, LabelTriplet, SynthesisConfig,
                                 SynthesisParams, decode_signed, encode_signed,
                                 gaussian_kernel_1d, generate_unified_labels,
                                 label_sigma_for, lowpass_2d, make_labels,
                                 reflection_layer, sample_synthesis_params,
                                 synthesize_mixture)
from gfrrn.labels.dataset import (DatasetManifest, PairRecord,
                                  center_crop_resize, list_images,
                                  load_dataset, read_label_cache,
                                  read_manifest, read_signed_png,
                                  scan_pair_directory, synthesize_dataset,
                                  write_label_cache,
                                  write_manifest, write_pair,
                                  write_signed_png)
