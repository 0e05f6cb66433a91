from gfrrn.evaluation.evaluation import (IDENTITY, PSNR_CAP, REPORT_COLUMNS,
                                        MetricsReport, WindowScoreMap,
                                        analyze_filters, evaluate_dataset,
                                        identity_restorer, inspect_weights,
                                        load_restorer, psnr, ssim,
                                        weights_summary, window_score_maps,
                                        write_window_scores)
from gfrrn.evaluation.plots import (SURFACE_FILES, plot_filter_surfaces,
                                   plot_window_scores)
