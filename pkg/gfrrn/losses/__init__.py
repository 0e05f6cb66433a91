from gfrrn.losses.extractors import (VGG_TAPS, IdentityExtractor,
                                    RandomConvExtractor, VGGExtractor)
from gfrrn.losses.losses import (EXCLUSION_LEVELS, PERCEPTUAL_TAPS,
                                 LossReport, LossWeights, compute_losses,
                                 content_loss, exclusion_loss, grad_op,
                                 perceptual_loss, reconstruction_loss,
                                 total_loss)
