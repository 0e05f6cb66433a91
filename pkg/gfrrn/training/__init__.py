from gfrrn.training.training import (CHECKPOINT_VERSION, METRIC_COLUMNS,
                                     Checkpoint, FitResult, GradCheckReport,
                                     PrefetchQueue, RunConfig, Sample,
                                     TrainConfig, batched, build_optimizer,
                                     collate, epoch_samples, fit,
                                     gradient_check, load_checkpoint,
                                     load_training_pairs,
                                     model_from_checkpoint, projection_loss,
                                     read_checkpoint, sample_seed,
                                     save_checkpoint, train_step)
