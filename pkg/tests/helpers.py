from subjsync.config import RunConfig

ALL_OFF = dict(use_masks=False, use_sharing=False, use_rfh=False, use_bli=False, use_dropout=False)


def small_config(**overrides) -> RunConfig:
    base = dict(n_images=3, grid_h=6, grid_w=6, d_model=16, d_k=16, heads=2, blocks=2, timesteps=4,
                seed=7, prompt_tokens=4)
    base.update(overrides)
    return RunConfig(**base)
