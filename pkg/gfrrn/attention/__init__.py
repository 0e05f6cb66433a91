from gfrrn.attention.attention import (AgentAttention, AttentionConfig,
                                      DynamicAgentAttention,
                                      LayerwiseDynamicAgentAttention,
                                      TokenWindows, WindowAttention,
                                      WindowImportanceEstimator, agent_grid,
                                      generate_agents, pad_to_window,
                                      remap_window_scores,
                                      shifted_window_mask, window_count,
                                      window_partition, window_reverse)
