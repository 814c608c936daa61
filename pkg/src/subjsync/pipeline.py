"""Deterministic toy denoiser with planted subjects and the two-pass procedure.

Pass 1 runs the plain network and caches self-attention inputs. Pass 2 runs
the consistency mechanisms: masked cross-image attention sharing (optionally
restricted to a reference subset), regional feature harmonization on the
self-attention outputs, and layout interpolation toward the cached pass.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from subjsync import attention as attn
from subjsync.bli import BliSchedule, EmbeddingCache, default_window, interpolate
from subjsync.config import RunConfig
from subjsync.errors import DegenerateError, HookError, InvariantViolation
from subjsync.linalg import masked_row_softmax, unit_normalize_rows
from subjsync.masking import aggregate_subject_maps, binarize, build_propagation_mask, dropout_mask
from subjsync.metrics import MetricReport, compute_metrics
from subjsync.rfh import CorrespondenceTable, correspond, harmonize
from subjsync.rng import SplitMix64

VANILLA = "vanilla"
CONSISTENT = "consistent"


@dataclass
class Block:
    cross: np.ndarray  # d x d_k, shared by patch queries and token keys
    cross_value: np.ndarray  # d x d
    proj: attn.ProjectionWeights
    out: np.ndarray  # d_k x d


@dataclass
class ToyDenoiser:
    blocks: list[Block]

    @classmethod
    def from_seed(cls, cfg: RunConfig) -> "ToyDenoiser":
        stream = SplitMix64.for_purpose(cfg.seed, "weights")
        d, dk = cfg.d_model, cfg.d_k
        bound = 1.0 / np.sqrt(d)

        def draw(rows, cols):
            return stream.uniform((rows, cols), -bound, bound)

        blocks = []
        for _ in range(cfg.blocks):
            cross = draw(d, dk)
            cross_value = draw(d, d)
            w_qk = draw(d, dk)
            w_v = draw(d, dk)
            # tied W_K = W_Q keeps attention similarity-driven at this weight scale;
            # W_O = W_V^T keeps the value path roughly direction-preserving
            proj = attn.ProjectionWeights(cfg.attn_gain * w_qk, w_qk, w_v, cfg.heads)
            blocks.append(Block(cross, cross_value, proj, w_v.T.copy()))
        return cls(blocks)


@dataclass
class SyntheticScene:
    latents: np.ndarray  # N x P x d initial patch embeddings
    tokens: np.ndarray  # N x prompt_tokens x d; rows 0..S-1 are subject tokens
    directions: np.ndarray  # S x d unit subject directions
    planted: np.ndarray  # N x S x P ground-truth subject masks
    beta: float

    @property
    def planted_union(self) -> np.ndarray:
        return self.planted.any(axis=1)

    @classmethod
    def from_seed(cls, cfg: RunConfig) -> "SyntheticScene":
        stream = SplitMix64.for_purpose(cfg.seed, "scene")
        n, h, w, d, s = cfg.n_images, cfg.grid_h, cfg.grid_w, cfg.d_model, cfg.n_subjects
        directions = unit_normalize_rows(stream.uniform((s, d), -1.0, 1.0))
        latents = np.empty((n, h * w, d))
        tokens = np.empty((n, cfg.prompt_tokens, d))
        planted = np.zeros((n, s, h * w), dtype=bool)
        band = w // s
        positions = unit_normalize_rows(stream.uniform((h * w, d), -1.0, 1.0))
        for i in range(n):
            x = unit_normalize_rows(stream.uniform((h * w, d), -1.0, 1.0)) + cfg.pos_scale * positions
            for k in range(s):
                rh = stream.integers(max(1, h // 4), max(1, h // 2) + 1)
                rw = stream.integers(max(1, band // 4), max(1, band // 2) + 1)
                top = stream.integers(0, h - rh + 1)
                left = k * band + stream.integers(0, band - rw + 1)
                grid = np.zeros((h, w), dtype=bool)
                grid[top:top + rh, left:left + rw] = True
                planted[i, k] = grid.ravel()
                x[planted[i, k]] += cfg.beta * directions[k]
            latents[i] = unit_normalize_rows(x)
            filler = unit_normalize_rows(stream.uniform((cfg.prompt_tokens - s, d), -1.0, 1.0)) \
                if cfg.prompt_tokens > s else np.empty((0, d))
            tokens[i] = np.concatenate([directions, filler])
        return cls(latents, tokens, directions, planted, cfg.beta)


class Hooks:
    """Observation points inside a denoising step; override what you need."""

    want_attention_weights = False

    def on_cross_attention(self, t, layer, mode, maps):
        pass

    def on_self_attention(self, t, layer, mode, outputs, weights, gammas, masks):
        pass

    def on_rfh(self, t, layer, before, after, table, applied):
        pass

    def on_block_end(self, t, layer, mode, x):
        pass


@dataclass
class StepContext:
    cfg: RunConfig
    net: ToyDenoiser
    scene: SyntheticScene
    cache: EmbeddingCache
    bli: BliSchedule
    dropout_stream: SplitMix64
    workers: int = 1
    tables: list = field(default_factory=list)
    subset_kv: dict = field(default_factory=dict)


def cross_attention(x, tokens, block: Block):
    """Tied-projection cross-attention of patches over prompt tokens.

    Returns the patch update (softmax over tokens) and the per-token maps
    over patches (softmax over patches), transposed to tokens x P.
    """
    dk = block.cross.shape[1]
    logits = (x @ block.cross) @ (tokens @ block.cross).T / np.sqrt(dk)
    update = masked_row_softmax(logits) @ (tokens @ block.cross_value)
    maps = masked_row_softmax(logits.T)
    return update, maps


def _mask_for_block(cfg: RunConfig, maps_so_far: list, grid) -> np.ndarray:
    """Binarized masks from the current timestep's maps collected so far."""
    n, p = cfg.n_images, cfg.n_patches
    if not maps_so_far:
        return np.ones((n, p), dtype=bool)
    layered = np.stack(maps_so_far)  # L x N x S x P
    return np.stack([binarize(aggregate_subject_maps(layered[:, i]), cfg.threshold, grid)
                     for i in range(n)])


def denoise_step(state: np.ndarray, t: int, mode: str, ctx: StepContext, hooks: Hooks | None = None):
    """Apply all blocks once. Returns (new_state, masks at the end of the step)."""
    cfg, net, scene = ctx.cfg, ctx.net, ctx.scene
    hooks = hooks or Hooks()
    n, s = cfg.n_images, cfg.n_subjects
    grid = (cfg.grid_h, cfg.grid_w)
    consistent = mode == CONSISTENT
    sharing = consistent and cfg.use_sharing
    rfh_on = consistent and cfg.use_rfh
    dropouts = consistent and cfg.use_dropout
    cross_layers = cfg.layer_set("cross_attn_layers")
    rfh_layers = cfg.layer_set("rfh_layers")
    subset = tuple(sorted(cfg.subset))
    rho = cfg.residual_scale
    x = np.array(state, dtype=np.float64, copy=True)
    maps_so_far = []

    for layer, block in enumerate(net.blocks):
        try:
            upd, maps = zip(*(cross_attention(x[i], scene.tokens[i], block) for i in range(n)))
            subj_maps = np.stack([m[:s] for m in maps])  # N x S x P
            _call(hooks.on_cross_attention, t, layer, mode, subj_maps)
            if layer in cross_layers:
                maps_so_far.append(subj_maps)
            x1 = x + rho * np.stack(upd)

            if mode == VANILLA and ctx.bli.applies(t, layer):
                for i in range(n):
                    ctx.cache.record(t, layer, i, x1[i])
            if consistent and cfg.use_bli and ctx.bli.applies(t, layer):
                x1 = np.stack([interpolate(x1[i], ctx.cache.fetch(t, layer, i), cfg.lam) for i in range(n)])

            masks = None
            if sharing or rfh_on:
                masks = _mask_for_block(cfg, maps_so_far, grid) if cfg.use_masks \
                    else np.ones((n, cfg.n_patches), dtype=bool)
                if dropouts and cfg.p_mask > 0:
                    masks = np.stack([dropout_mask(m, cfg.p_mask, ctx.dropout_stream) for m in masks])

            batch = attn.project_batch(list(x1), block.proj)
            weights = gammas = None
            if sharing:
                gammas = [build_propagation_mask(i, masks) for i in range(n)]
                rate = cfg.p_attn if dropouts else 0.0
                kw = dict(dropout_rate=rate, stream=ctx.dropout_stream, workers=ctx.workers,
                          return_weights=hooks.want_attention_weights)
                if subset:
                    kv = attn.subset_kv(batch, subset)
                    ctx.subset_kv[(t, layer)] = kv
                    res = attn.subset_attention(batch, subset, gammas, cache=kv, **kw)
                else:
                    res = attn.cross_image_attention(batch, gammas, **kw)
                h = res[0] if hooks.want_attention_weights else res
                weights = res[1] if hooks.want_attention_weights else None
            else:
                res = [attn.attend(batch.q[i], batch.k[i], batch.v[i], batch.heads,
                                   return_weights=hooks.want_attention_weights) for i in range(n)]
                if hooks.want_attention_weights:
                    h, weights = [r[0] for r in res], [r[1] for r in res]
                else:
                    h = res
            h = [np.asarray(r) for r in h]
            _call(hooks.on_self_attention, t, layer, mode, h, weights, gammas, masks)

            if rfh_on and layer in rfh_layers:
                targets = subset if subset else None
                table = correspond(h, masks, cfg.tau, targets=targets)
                rate = cfg.p_rfh if dropouts else 0.0
                before = h
                harmonized, applied = [], []
                for i in range(n):
                    hi, app = harmonize(before[i], table.for_source(i), before, cfg.gamma, masks[i],
                                        rate, ctx.dropout_stream)
                    harmonized.append(hi)
                    applied.extend(app)
                h = harmonized
                ctx.tables.append((t, layer, table))
                _call(hooks.on_rfh, t, layer, before, h, table, applied)

            x = np.stack([unit_normalize_rows(x1[i] + rho * (h[i] @ block.out)) for i in range(n)])
        except DegenerateError as exc:
            raise InvariantViolation(_module_of(exc), str(exc), timestep=t, layer=layer) from exc
        _call(hooks.on_block_end, t, layer, mode, x)

    layered = np.stack(maps_so_far)
    end_masks = np.stack([binarize(aggregate_subject_maps(layered[:, i]), cfg.threshold, grid)
                          for i in range(n)])
    return x, end_masks


def _module_of(exc: Exception) -> str:
    tb = exc.__traceback__
    name = "pipeline"
    while tb is not None:
        mod = tb.tb_frame.f_globals.get("__name__", "")
        if mod.startswith("subjsync.") and mod != "subjsync.linalg":
            name = mod.split(".", 1)[1]
        tb = tb.tb_next
    return name


def _call(fn, t, layer, *args):
    try:
        fn(t, layer, *args)
    except Exception as exc:
        raise HookError(t, layer, exc) from exc


def worker_count() -> int:
    raw = os.environ.get("SSYNC_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


@dataclass
class RunResult:
    config: RunConfig
    final_embeddings: np.ndarray  # N x P x d, consistency pass
    vanilla_embeddings: np.ndarray | None  # N x P x d
    masks: np.ndarray  # T x N x P, consistency pass
    vanilla_masks: np.ndarray | None  # T x N x P
    planted: np.ndarray  # N x P
    tables: list  # (timestep, layer, CorrespondenceTable)
    metrics: MetricReport
    cache: EmbeddingCache
    subset_kv: dict

    @property
    def final_masks(self) -> np.ndarray:
        return self.masks[-1]


def bli_schedule(cfg: RunConfig) -> BliSchedule:
    return BliSchedule(cfg.lam, default_window(cfg.timesteps, cfg.bli_window), cfg.layer_set("bli_layers"))


def run(cfg: RunConfig, hooks: Hooks | None = None, cache: EmbeddingCache | None = None,
        workers: int | None = None, full_vanilla: bool = True) -> RunResult:
    """Pass 1 (vanilla, caching) then pass 2 (consistent).

    A complete ``cache`` from an earlier run of the same seed replaces pass
    1's caching role. With ``full_vanilla=False`` pass 1 only runs as far as
    the cache needs (not at all when a cache is supplied or BLI is off) and
    the vanilla fields of the result are None. The consistent pass is
    unaffected either way.
    """
    cfg.validate()
    net = ToyDenoiser.from_seed(cfg)
    scene = SyntheticScene.from_seed(cfg)
    bli = bli_schedule(cfg)
    preloaded = cache is not None
    ctx = StepContext(cfg, net, scene, EmbeddingCache() if not preloaded else cache, bli,
                      SplitMix64.for_purpose(cfg.seed, "dropout"),
                      workers=worker_count() if workers is None else workers)
    if preloaded and not cache.is_complete(bli.window, bli.layers, cfg.n_images):
        raise InvariantViolation("bli", "supplied embedding cache does not cover the window")

    if full_vanilla:
        vanilla_steps = cfg.timesteps
    elif preloaded or not (cfg.use_bli and bli.layers):
        vanilla_steps = 0
    else:
        vanilla_steps = max(bli.window, default=-1) + 1
    # the vanilla pass draws nothing from the dropout stream, so sharing it is safe
    vanilla_ctx = ctx if not preloaded else StepContext(cfg, net, scene, EmbeddingCache(), bli,
                                                        ctx.dropout_stream, ctx.workers)
    x = scene.latents.copy()
    vanilla_masks = []
    for t in range(vanilla_steps):
        x, m = denoise_step(x, t, VANILLA, vanilla_ctx, hooks)
        vanilla_masks.append(m)
    vanilla_final = x if full_vanilla else None
    vanilla_masks = np.stack(vanilla_masks) if full_vanilla else None

    x = scene.latents.copy()
    masks = []
    for t in range(cfg.timesteps):
        x, m = denoise_step(x, t, CONSISTENT, ctx, hooks)
        masks.append(m)

    planted = scene.planted_union
    report = compute_metrics(x, masks[-1], planted)
    return RunResult(cfg, x, vanilla_final, np.stack(masks), vanilla_masks, planted,
                     ctx.tables, report, ctx.cache, ctx.subset_kv)
