from gfrrn.frequency.frequency import (GAFLB, BandCrossAttention,
                                      FrequencyMask, MaskKind, build_mask,
                                      centered_frequencies, filter_report,
                                      fmim_split, frequency_grid,
                                      impulse_response, ringing_metric,
                                      spectral_mask)
