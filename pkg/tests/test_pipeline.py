import math

import numpy as np
import pytest

from helpers import ALL_OFF, small_config
from oracles import (
    aggregate_loops,
    attention_brute,
    correspond_exhaustive,
    matmul_loops,
    otsu_exhaustive,
    propagation_direct,
    softmax_direct,
)
from subjsync.bli import EmbeddingCache
from subjsync.errors import HookError
from subjsync.pipeline import (
    CONSISTENT,
    VANILLA,
    Hooks,
    StepContext,
    SyntheticScene,
    ToyDenoiser,
    bli_schedule,
    denoise_step,
    run,
)
from subjsync.rng import SplitMix64
from subjsync.tensorio import dumps_tensor


def test_toggles_off_bitwise_equals_vanilla():
    res = run(small_config(**ALL_OFF))
    assert np.array_equal(res.final_embeddings, res.vanilla_embeddings)
    assert np.array_equal(res.masks, res.vanilla_masks)
    assert res.tables == []


def test_same_seed_bitwise_identical():
    a, b = run(small_config()), run(small_config())
    assert dumps_tensor(a.final_embeddings) == dumps_tensor(b.final_embeddings)
    assert np.array_equal(a.masks, b.masks)
    assert a.metrics.as_dict() == b.metrics.as_dict()


def test_seed_changes_weights_and_scene():
    a, b = small_config(seed=1), small_config(seed=2)
    assert not np.array_equal(ToyDenoiser.from_seed(a).blocks[0].cross, ToyDenoiser.from_seed(b).blocks[0].cross)
    assert not np.array_equal(SyntheticScene.from_seed(a).latents, SyntheticScene.from_seed(b).latents)


def test_thread_count_does_not_change_results():
    cfg = small_config(n_images=4)
    one, many = run(cfg, workers=1), run(cfg, workers=3)
    assert dumps_tensor(one.final_embeddings) == dumps_tensor(many.final_embeddings)
    assert one.metrics.as_dict() == many.metrics.as_dict()


def test_thread_env_var(monkeypatch):
    cfg = small_config()
    monkeypatch.setenv("SSYNC_THREADS", "1")
    a = run(cfg)
    monkeypatch.setenv("SSYNC_THREADS", "4")
    b = run(cfg)
    assert dumps_tensor(a.final_embeddings) == dumps_tensor(b.final_embeddings)


def test_single_image_matches_vanilla():
    res = run(small_config(n_images=1))
    assert np.max(np.abs(res.final_embeddings - res.vanilla_embeddings)) <= 1e-9


class NormWatcher(Hooks):
    def __init__(self):
        self.worst = 0.0

    def on_block_end(self, t, layer, mode, x):
        self.worst = max(self.worst, float(np.max(np.abs(np.linalg.norm(x, axis=-1) - 1.0))))


def test_rows_stay_unit_norm():
    hooks = NormWatcher()
    run(small_config(), hooks=hooks)
    assert hooks.worst < 1e-12


def test_scene_invariants():
    cfg = small_config(n_subjects=2)
    scene = SyntheticScene.from_seed(cfg)
    assert np.all(scene.planted.sum(axis=-1) >= 1)
    assert not np.any(scene.planted[:, 0] & scene.planted[:, 1])
    assert np.allclose(np.linalg.norm(scene.latents, axis=-1), 1.0)


class MapRecorder(Hooks):
    def __init__(self):
        self.maps = []

    def on_cross_attention(self, t, layer, mode, maps):
        if mode == VANILLA:
            self.maps.append(maps)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_planted_signal_in_first_pass(seed):
    from subjsync.config import RunConfig

    cfg = RunConfig(seed=seed, timesteps=2)
    scene = SyntheticScene.from_seed(cfg)
    ctx = StepContext(cfg, ToyDenoiser.from_seed(cfg), scene, EmbeddingCache(), bli_schedule(cfg),
                      SplitMix64.for_purpose(seed, "dropout"))
    hooks = MapRecorder()
    x = scene.latents
    for t in range(cfg.timesteps):
        x, _ = denoise_step(x, t, VANILLA, ctx, hooks)
    maps = np.stack(hooks.maps)[:, :, 0]  # calls x N x P
    planted = scene.planted[:, 0]
    for i in range(cfg.n_images):
        assert maps[:, i][:, planted[i]].mean() > maps[:, i][:, ~planted[i]].mean()


class Boom(Hooks):
    def on_rfh(self, t, layer, before, after, table, applied):
        raise RuntimeError("boom")


def test_hook_failure_carries_context():
    with pytest.raises(HookError) as info:
        run(small_config(), hooks=Boom())
    assert info.value.timestep == 0 and info.value.layer == 0
    assert "boom" in str(info.value)


def test_cache_reuse_gives_same_result():
    cfg = small_config()
    first = run(cfg)
    again = run(cfg, cache=first.cache)
    assert np.array_equal(first.final_embeddings, again.final_embeddings)


def test_subset_mode_runs_and_stores_kv():
    res = run(small_config(subset=(0,)))
    assert res.subset_kv
    assert {m.target_image for _, _, table in res.tables for m in table if m.source_image != 0} <= {0}


# straight-line composition oracle for one consistent step


def _rescale(v):
    lo, hi = min(v), max(v)
    return [1.0] * len(v) if hi == lo else [(x - lo) / (hi - lo) for x in v]


def _otsu_mask(values):
    v = _rescale(values)
    if max(v) == min(v):
        return [True] * len(v)
    t = otsu_exhaustive(v)
    if t is None:
        return [True] * len(v)
    return [min(math.floor(x * 256), 255) >= t for x in v]


def _unit(row):
    n = math.sqrt(sum(a * a for a in row))
    return [a / n for a in row]


def oracle_step(x, tokens, block, cached, cfg):
    n, s, rho = cfg.n_images, cfg.n_subjects, cfg.residual_scale
    wc, wcv = block.cross.tolist(), block.cross_value.tolist()
    x1, subj_maps = [], []
    for i in range(n):
        qx = matmul_loops(x[i], wc)
        kt = matmul_loops(tokens[i], wc)
        logits = [[sum(a * b for a, b in zip(qr, kr)) / math.sqrt(len(wc[0])) for kr in kt] for qr in qx]
        vt = matmul_loops(tokens[i], wcv)
        rows = []
        for p, lrow in enumerate(logits):
            w = softmax_direct(lrow)
            upd = [sum(w[k] * vt[k][c] for k in range(len(vt))) for c in range(len(vt[0]))]
            rows.append([x[i][p][c] + rho * upd[c] for c in range(len(upd))])
        cols = [softmax_direct([logits[p][k] for p in range(len(logits))]) for k in range(s)]
        subj_maps.append(cols)
        x1.append(rows)
    lam = cfg.lam
    x1 = [[[(1 - lam) * a + lam * b for a, b in zip(r1, r2)] for r1, r2 in zip(x1[i], cached[i])]
          for i in range(n)]
    masks = [_otsu_mask(aggregate_loops([subj_maps[i]])) for i in range(n)]

    wq, wk, wv = (m.tolist() for m in (block.proj.w_q, block.proj.w_k, block.proj.w_v))
    qs = [matmul_loops(x1[i], wq) for i in range(n)]
    keys = [r for i in range(n) for r in matmul_loops(x1[i], wk)]
    vals = [r for i in range(n) for r in matmul_loops(x1[i], wv)]
    h = [attention_brute(qs[i], keys, vals, propagation_direct(i, masks), cfg.heads) for i in range(n)]

    best = correspond_exhaustive(h, masks, cfg.tau)
    out_h = [[list(r) for r in h[i]] for i in range(n)]
    for i in range(n):
        keys_i = sorted(r for (src, r) in best if src == i)
        if not keys_i:
            continue
        scores = [best[(i, r)][2] for r in keys_i]
        if max(scores) == min(scores):
            flags = [True] * len(scores)
        else:
            resc = _rescale(scores)
            t = otsu_exhaustive(resc)
            flags = [True] * len(scores) if t is None else [min(math.floor(v * 256), 255) >= t for v in resc]
        for r, f in zip(keys_i, flags):
            if f:
                j, w, _ = best[(i, r)]
                out_h[i][r] = [a + cfg.gamma * (b - a) for a, b in zip(h[i][r], h[j][w])]

    wo = block.out.tolist()
    new = []
    for i in range(n):
        proj = matmul_loops(out_h[i], wo)
        new.append([_unit([a + rho * b for a, b in zip(r1, r2)]) for r1, r2 in zip(x1[i], proj)])
    return new, masks


@pytest.mark.parametrize("seed", range(6))
def test_one_step_matches_composition_oracle(seed):
    cfg = small_config(n_images=2, grid_h=2, grid_w=2, d_model=4, d_k=4, heads=2, blocks=1, timesteps=4,
                       use_dropout=False, prompt_tokens=2, seed=seed)
    net, scene = ToyDenoiser.from_seed(cfg), SyntheticScene.from_seed(cfg)
    cache = EmbeddingCache()
    gen = np.random.default_rng(0)
    cached = [gen.normal(size=(4, 4)) for _ in range(2)]
    for i in range(2):
        cache.record(0, 0, i, cached[i])
    ctx = StepContext(cfg, net, scene, cache, bli_schedule(cfg), SplitMix64(0))
    got, _ = denoise_step(scene.latents, 0, CONSISTENT, ctx)
    ref, ref_masks = oracle_step(scene.latents.tolist(), scene.tokens.tolist(), net.blocks[0],
                                 [c.tolist() for c in cached], cfg)
    assert len(ctx.tables) == 1
    assert np.max(np.abs(got - np.array(ref))) < 1e-10


@pytest.mark.parametrize("overrides", [{}, {"use_bli": False}, {"bli_window": 0.0}])
def test_short_vanilla_pass_gives_same_result(overrides):
    cfg = small_config(**overrides)
    full, short = run(cfg), run(cfg, full_vanilla=False)
    assert np.array_equal(full.final_embeddings, short.final_embeddings)
    assert short.vanilla_embeddings is None
    reused = run(cfg, cache=full.cache, full_vanilla=False)
    assert np.array_equal(full.final_embeddings, reused.final_embeddings)
