"""Self-supervised optimization: a sliding window over the event stream, the
contrast + geometry objective, analytic gradients and Adam updates."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from .core import CameraIntrinsics, EventSlice, FlowSequence, write_csv
from .geometry import depth_pose_to_flows, geometry_consistency_loss, total_loss
from .predictor import DirectPredictor, upsample_matrix
from .warp import IweStack, WarpWindow, contrast_loss, get_backend, loss_and_grad
from .warp.backends import splat_vec


class DivergenceError(RuntimeError):
    pass


class GradientCheckError(RuntimeError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 1e-4
    steps_per_update: int = 10
    max_updates: int = 100
    lambda_geo: float = 0.05
    bins: int = 10
    bin_us: int = 10_000
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    backend: str = "parallel"
    seed: int = 0
    divergence_factor: float = 10.0
    gradcheck_every: int = 0  # spot-check 1-in-N updates against finite differences
    flow_factor: int = 8  # flow-only mode: flow grid is H/flow_factor x W/flow_factor
    search_radius_px: float = 16.0  # flow-only mode: global search half-width (0 disables)
    search_step_px: float = 1.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.steps_per_update < 1:
            raise ValueError("steps_per_update must be >= 1")
        if self.lambda_geo < 0:
            raise ValueError("lambda_geo must be non-negative")
        if self.bins < 1 or self.bin_us < 1 or self.max_updates < 0:
            raise ValueError("bins, bin_us must be >= 1 and max_updates >= 0")
        if self.flow_factor < 1:
            raise ValueError("flow_factor must be >= 1")
        if self.search_radius_px < 0 or not self.search_step_px > 0:
            raise ValueError("search radius must be >= 0 and search step > 0")

    @classmethod
    def from_dict(cls, cfg: dict) -> "OptimizerConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(cfg) - known - {"preset"}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        base = PRESETS[cfg.get("preset", "default")]
        return replace(base, **{k: v for k, v in cfg.items() if k != "preset"})

    @classmethod
    def load(cls, path) -> "OptimizerConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    "default": OptimizerConfig(),
    # slower learning rate for long-running online adaptation
    "online": OptimizerConfig(learning_rate=1e-5),
}


class Adam:
    def __init__(self, shapes, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.steps = 0

    def step(self, params, grads):
        """Update ``params`` in place."""
        self.steps += 1
        c1 = 1 - self.beta1**self.steps
        c2 = 1 - self.beta2**self.steps
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


LOG_COLUMNS = ("update", "window_start_us", "l_cm", "l_geo", "total", "rsat",
               "wall_time_s", "grad_norm_depth", "grad_norm_pose")


class TrainLog:
    def __init__(self):
        self.rows = []

    def append(self, **row):
        self.rows.append({c: row[c] for c in LOG_COLUMNS})

    def __len__(self):
        return len(self.rows)

    def column(self, name) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=np.float64)

    def to_csv(self, path) -> None:
        write_csv(path, self.rows, LOG_COLUMNS)

    def same_values(self, other: "TrainLog") -> bool:
        """Equality ignoring wall-clock time."""
        strip = lambda rows: [{k: v for k, v in r.items() if k != "wall_time_s"} for r in rows]
        return strip(self.rows) == strip(other.rows)


# --- depth + pose ---------------------------------------------------------------


@dataclass
class Objective:
    l_cm: float
    l_geo: float
    total: float
    d_depth_params: np.ndarray | None = None
    d_pose_params: np.ndarray | None = None


def predictor_objective(pred: DirectPredictor, slice_: EventSlice, k: CameraIntrinsics,
                        lambda_geo=0.05, backend="parallel", need_grad=True) -> Objective:
    """Contrast loss of the predicted flows plus the weighted consistency loss.

    The consistency term compares the predicted depth with itself across each
    bin's pose (the scene is static and one depth map serves every bin) and is
    averaged over bins.
    """
    edges = np.linspace(slice_.t_start, slice_.t_end, pred.bins + 1)
    depth, poses = pred.decode()
    flows = depth_pose_to_flows(depth, poses, k, edges)
    l_cm, flow_grad, _ = loss_and_grad(WarpWindow(slice_, flows), backend, need_grad)
    l_geo = 0.0
    depth_grad = pose_grad = None
    if lambda_geo > 0:
        if need_grad:
            depth_grad = np.zeros(depth.shape)
            pose_grad = np.zeros((pred.bins, 6))
        for i, pose in enumerate(poses):
            geo = geometry_consistency_loss(depth, depth, pose, k, need_grad)
            l_geo += geo.value / pred.bins
            if need_grad:
                depth_grad += lambda_geo * (geo.d_d0 + geo.d_d1) / pred.bins
                pose_grad[i] = lambda_geo * geo.d_pose / pred.bins
    out = Objective(l_cm, l_geo, total_loss(l_cm, l_geo, lambda_geo))
    if need_grad:
        out.d_depth_params, out.d_pose_params = pred.accumulate_gradients(
            flow_grad, k, edges, depth_grad, pose_grad)
    return out


def predictor_fd_gradient(pred: DirectPredictor, slice_, k, lambda_geo, backend="parallel",
                          step=1e-6, indices=None):
    """Central differences of the total objective for selected flat parameter indices."""
    flat = np.concatenate([pred.depth_params.ravel(), pred.pose_params.ravel()])
    if indices is None:
        indices = range(flat.size)
    n_depth = pred.depth_params.size
    out = {}
    for idx in indices:
        vals = []
        for sign in (1, -1):
            probe = flat.copy()
            probe[idx] += sign * step
            trial = DirectPredictor(probe[:n_depth].reshape(pred.depth_params.shape),
                                    probe[n_depth:].reshape(-1, 6), pred.height, pred.width,
                                    pred.rotation)
            vals.append(predictor_objective(trial, slice_, k, lambda_geo, backend, False).total)
        out[idx] = (vals[0] - vals[1]) / (2 * step)
    return out


def _window_starts(n_bins_total, bins, stride):
    return list(range(0, n_bins_total - bins + 1, stride))


def run_window(stream: EventSlice, pred: DirectPredictor, k: CameraIntrinsics,
               cfg: OptimizerConfig = OptimizerConfig(), callback=None):
    """Optimize ``pred`` over a sliding window of ``cfg.bins`` bins.

    The window advances by ``steps_per_update`` bins after every update and
    wraps to the start of the stream when it runs out, so a short synthetic
    stream can feed any number of updates. The predictor is warm-started from
    one window to the next. Windows without events are skipped. Returns a new
    predictor and the log; the input predictor is left untouched.
    """
    if pred.bins != cfg.bins:
        raise ValueError(f"predictor has {pred.bins} pose bins, config wants {cfg.bins}")
    pred = pred.copy()
    log = TrainLog()
    total_bins = (stream.t_end - stream.t_start) // cfg.bin_us
    starts = _window_starts(total_bins, cfg.bins, cfg.steps_per_update)
    if not starts:
        raise ValueError(f"stream holds {total_bins} bins, window needs {cfg.bins}")
    windows = []
    for s in starts:
        t0 = stream.t_start + s * cfg.bin_us
        w = stream.crop(t0, t0 + cfg.bins * cfg.bin_us)
        if len(w):
            windows.append(w)
    if not windows or cfg.max_updates == 0:
        return pred, log

    backend = get_backend(cfg.backend)
    zero_loss = {}
    adam = Adam([pred.depth_params.shape, pred.pose_params.shape], cfg.learning_rate,
                cfg.beta1, cfg.beta2, cfg.adam_eps)
    rng = np.random.default_rng(cfg.seed)
    initial = None
    for update in range(cfg.max_updates):
        wi = update % len(windows)
        window = windows[wi]
        t_begin = time.perf_counter()
        try:
            obj = predictor_objective(pred, window, k, cfg.lambda_geo, backend)
        except ValueError as err:
            if initial is None:
                raise
            raise DivergenceError(f"update {update}: parameters left the valid range ({err})") from err
        if initial is None:
            initial = obj.total
        if not np.isfinite(obj.total) or obj.total > cfg.divergence_factor * initial:
            raise DivergenceError(
                f"update {update}: loss {obj.total:.6g} exceeds {cfg.divergence_factor}x "
                f"the initial {initial:.6g}")
        if cfg.gradcheck_every and update % cfg.gradcheck_every == 0:
            _spot_check(pred, window, k, cfg, backend, obj, rng)
        if wi not in zero_loss:
            edges = np.linspace(window.t_start, window.t_end, cfg.bins + 1)
            zero = FlowSequence.zeros(cfg.bins, *window.shape, edges[0], edges[-1])
            zero_loss[wi] = loss_and_grad(WarpWindow(window, zero), backend, False)[0]
        adam.step([pred.depth_params, pred.pose_params], [obj.d_depth_params, obj.d_pose_params])
        if not pred.rotation:
            pred.pose_params[:, :3] = 0.0
        log.append(
            update=update, window_start_us=window.t_start, l_cm=obj.l_cm, l_geo=obj.l_geo,
            total=obj.total, rsat=obj.l_cm / zero_loss[wi] if zero_loss[wi] else float("nan"),
            wall_time_s=time.perf_counter() - t_begin,
            grad_norm_depth=float(np.linalg.norm(obj.d_depth_params)),
            grad_norm_pose=float(np.linalg.norm(obj.d_pose_params)),
        )
        if callback is not None:
            callback(update, pred, obj)
    return pred, log


def _spot_check(pred, window, k, cfg, backend, obj, rng, n_params=3, tol=1e-3):
    analytic = np.concatenate([obj.d_depth_params.ravel(), obj.d_pose_params.ravel()])
    candidates = np.arange(analytic.size)
    if not pred.rotation:
        n_depth = pred.depth_params.size
        candidates = candidates[(candidates < n_depth) | ((candidates - n_depth) % 6 >= 3)]
    picks = rng.choice(candidates, size=min(n_params, len(candidates)), replace=False)
    fd = predictor_fd_gradient(pred, window, k, cfg.lambda_geo, backend, indices=picks)
    ref = np.array([fd[i] for i in picks])
    err = np.max(np.abs(analytic[picks] - ref)) / max(np.max(np.abs(ref)), 1e-12)
    if err > tol:
        raise GradientCheckError(f"spot check failed: relative error {err:.3g}")


# --- flow only ------------------------------------------------------------------


def _flow_upsamplers(height, width, factor):
    h = max(1, round(height / factor))
    w = max(1, round(width / factor))
    return upsample_matrix(height, h), upsample_matrix(width, w)


def _score_constant_flows(slice_: EventSlice, bins: int, candidates):
    """Contrast loss of each constant flow in ``candidates`` (n, 2) px/s.

    The events are placed on a sensor padded by the farthest any candidate
    can move them. A constant flow does not depend on position, so this
    changes nothing except that no candidate can drop events at the border
    (which would otherwise lower its loss). Under a constant flow the warp
    reduces to ``x + u (t_ref - t)``, so positions are computed directly.
    """
    candidates = np.asarray(candidates, dtype=np.float64).reshape(-1, 2)
    span_s = (slice_.t_end - slice_.t_start) * 1e-6
    pad_x, pad_y = (int(np.ceil(r * span_s)) + 1 for r in np.abs(candidates).max(axis=0))
    height, width = slice_.height + 2 * pad_y, slice_.width + 2 * pad_x
    edges = np.linspace(slice_.t_start, slice_.t_end, bins + 1)
    t = slice_.t.astype(np.float64)
    lag = (edges[None, :] - t[:, None]) * 1e-6  # (N, B+1) seconds to each reference
    tbar = np.abs(t[:, None] - edges[None, :]) / (edges[-1] - edges[0])
    pos0 = np.stack([slice_.x + pad_x, slice_.y + pad_y], axis=1).astype(np.float64)
    pol = (slice_.p < 0).astype(np.int64)
    losses = np.empty(len(candidates))
    for i, vec in enumerate(candidates):
        pos = pos0[:, None, :] + lag[..., None] * vec
        stack = IweStack.zeros(bins + 1, height, width)
        stack.n_surviving = len(slice_)
        splat_vec(pos, pol, tbar, None, stack)
        losses[i] = contrast_loss(stack)
    return losses


def search_constant_flow(slice_: EventSlice, bins: int, radius_px=16.0, step_px=1.0, refine=4):
    """Grid search for the single flow vector (px/s) that minimizes the contrast loss.

    Candidates are spaced ``step_px`` apart in displacement over the whole
    slice and reach ``radius_px``. The ``refine`` best of them are refined on
    grids a quarter as fine: flows that move events by whole pixels per bin
    skip the bilinear spread and can outscore a coarse sample that sits just
    beside the true basin. Returns ``(flow, loss)``.
    """
    span_s = (slice_.t_end - slice_.t_start) * 1e-6
    n = int(np.floor(radius_px / step_px))
    coarse = np.arange(-n, n + 1) * step_px / span_s
    grid = np.stack(np.meshgrid(coarse, coarse), axis=-1).reshape(-1, 2)
    losses = _score_constant_flows(slice_, bins, grid)
    seeds = grid[np.lexsort((np.linalg.norm(grid, axis=1), losses))[:max(1, refine)]]
    fine = np.arange(-4, 5) * step_px / 4 / span_s
    offsets = np.stack(np.meshgrid(fine, fine), axis=-1).reshape(-1, 2)
    grid = (seeds[:, None, :] + offsets[None]).reshape(-1, 2)
    losses = _score_constant_flows(slice_, bins, grid)
    i = _pick(grid, losses)
    return grid[i], float(losses[i])


def _pick(candidates, losses, rtol=1e-9):
    """Index of the slowest candidate among those tied (within ``rtol``) for the lowest loss."""
    low = losses.min()
    tied = np.flatnonzero(losses <= low + rtol * abs(low))
    return int(tied[np.argmin(np.linalg.norm(candidates[tied], axis=1))])


def optimize_flow_only(slice_: EventSlice, bins: int, cfg: OptimizerConfig = OptimizerConfig(),
                       init=None, return_log=False):
    """Per-bin flow over the whole slice that minimizes the contrast loss.

    The flow is parameterized on a grid ``cfg.flow_factor`` times coarser than
    the sensor and bilinearly upsampled (``flow_factor=1`` gives one vector per
    pixel). Parameters are in px/s, so ``learning_rate`` is in px/s per step.

    The loss only slopes toward the optimum within about a pixel of residual
    motion over the slice, so unless ``init`` is given, a global grid search
    (``search_constant_flow``) picks the starting flow and Adam refines it.
    The iterate with the lowest loss seen (zero flow included) is returned,
    so the result never scores worse than zero flow or its starting point.
    """
    if len(slice_) == 0:
        raise ValueError("flow-only optimization needs a non-empty slice")
    height, width = slice_.shape
    up_y, up_x = _flow_upsamplers(height, width, cfg.flow_factor)
    params = np.zeros((bins, up_y.shape[1], up_x.shape[1], 2))
    if init is not None:
        params[:] = init
    elif cfg.search_radius_px > 0:
        params[:], _ = search_constant_flow(slice_, bins, cfg.search_radius_px, cfg.search_step_px)
    edges = np.linspace(slice_.t_start, slice_.t_end, bins + 1)
    backend = get_backend(cfg.backend)

    def expand(p):
        return np.einsum("Hh,bhwc,Ww->bHWc", up_y, p, up_x)

    def window(p):
        return WarpWindow(slice_, FlowSequence(expand(p), edges))

    log = TrainLog()
    zero = loss_and_grad(window(np.zeros_like(params)), backend, False)[0]
    # zero flow competes too, so the result never scores worse than it
    best, best_loss = np.zeros_like(params), zero
    initial = None
    adam = Adam([params.shape], cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    for update in range(cfg.max_updates + 1):
        t_begin = time.perf_counter()
        last = update == cfg.max_updates
        loss, grad, _ = loss_and_grad(window(params), backend, not last)
        if initial is None:
            initial = loss
        if loss < best_loss:
            best_loss, best = loss, params.copy()
        if not np.isfinite(loss) or loss > cfg.divergence_factor * max(initial, zero):
            raise DivergenceError(f"update {update}: loss {loss:.6g} diverged")
        if last:
            break
        g = np.einsum("Hh,bHWc,Ww->bhwc", up_y, grad, up_x)
        adam.step([params], [g])
        log.append(update=update, window_start_us=slice_.t_start, l_cm=loss, l_geo=0.0, total=loss,
                   rsat=loss / zero if zero else float("nan"),
                   wall_time_s=time.perf_counter() - t_begin,
                   grad_norm_depth=0.0, grad_norm_pose=float(np.linalg.norm(g)))
    result = FlowSequence(expand(best), edges)
    return (result, log) if return_log else result


def initial_predictor(slice_: EventSlice, k: CameraIntrinsics, bins: int, factor=8, tile=16,
                      cfg: OptimizerConfig = OptimizerConfig(), min_events=20,
                      min_cosine=0.9, fine_step_px=0.05) -> DirectPredictor:
    """Translation-only predictor seeded from per-block constant-flow searches.

    Every ``tile`` x ``tile`` block with at least ``min_events`` events gets
    its own flow search. The component-wise median of the block flows fixes
    the translation direction (rotation frozen, no forward motion) and the
    median block speed along it is taken as unit depth. A block's depth is
    the inverse of its relative speed, refined by a line search along the
    dominant direction in ``fine_step_px`` displacement steps. Blocks with
    too few events, or whose flow points more than ``arccos(min_cosine)``
    away, get the median depth.
    """
    height, width = slice_.shape
    pred = DirectPredictor.create(height, width, bins, factor, rotation=False)
    rows, cols = -(-height // tile), -(-width // tile)
    flows = np.full((rows, cols, 2), np.nan)
    for r in range(rows):
        for c in range(cols):
            inside = (slice_.y // tile == r) & (slice_.x // tile == c)
            if inside.sum() >= min_events:
                flows[r, c], _ = search_constant_flow(slice_.select(inside), bins, cfg.search_radius_px,
                                                      cfg.search_step_px)
    found = np.isfinite(flows[..., 0])
    if not found.any():
        return pred
    dominant = np.median(flows[found], axis=0)
    speed = float(np.linalg.norm(dominant))
    if speed == 0.0:
        return pred
    direction = dominant / speed
    along = np.where(found, flows[..., 0] * direction[0] + flows[..., 1] * direction[1], 0.0)
    norms = np.where(found, np.linalg.norm(np.nan_to_num(flows), axis=-1), 0.0)
    usable = found & (along > 0) & (along >= min_cosine * norms)
    if not usable.any():
        return pred
    span_s = (slice_.t_end - slice_.t_start) * 1e-6
    # scale offsets covering +-0.5 px of displacement along the dominant flow
    n_fine = int(round(0.5 / fine_step_px))
    offsets = np.arange(-n_fine, n_fine + 1) * fine_step_px / (speed * span_s)
    for r, c in zip(*np.nonzero(usable)):
        inside = (slice_.y // tile == r) & (slice_.x // tile == c)
        scales = along[r, c] / speed + offsets
        scales = scales[scales > 0]
        losses = _score_constant_flows(slice_.select(inside), bins, scales[:, None] * dominant)
        along[r, c] = scales[int(np.argmin(losses))] * speed
    reference = float(np.median(along[usable]))
    depth = np.full((rows, cols), 1.0)
    depth[usable] = reference / along[usable]
    depth[~usable] = np.median(depth[usable])

    dt = span_s / bins
    pred.pose_params[:, 3] = reference * direction[0] * dt / k.fx
    pred.pose_params[:, 4] = reference * direction[1] * dt / k.fy
    h, w = pred.depth_params.shape
    centre_y = np.clip(((np.arange(h) + 0.5) * height / h).astype(int) // tile, 0, rows - 1)
    centre_x = np.clip(((np.arange(w) + 0.5) * width / w).astype(int) // tile, 0, cols - 1)
    pred.depth_params[:] = np.log(np.expm1(depth[np.ix_(centre_y, centre_x)]))  # inverse softplus
    return pred


def optimize_depth(slice_: EventSlice, k: CameraIntrinsics, cfg: OptimizerConfig = OptimizerConfig(),
                   pred: DirectPredictor | None = None, factor=8, return_log=False):
    """Depth and per-bin poses for one slice of ``cfg.bins`` bins.

    Without ``pred`` the starting point comes from ``initial_predictor``.
    Adam then runs for ``cfg.max_updates`` updates and the iterate with the
    lowest total loss is returned.
    """
    if len(slice_) == 0:
        raise ValueError("depth optimization needs a non-empty slice")
    if pred is None:
        pred = initial_predictor(slice_, k, cfg.bins, factor, cfg=cfg)
    elif pred.bins != cfg.bins:
        raise ValueError(f"predictor has {pred.bins} pose bins, config wants {cfg.bins}")
    pred = pred.copy()
    backend = get_backend(cfg.backend)
    edges = np.linspace(slice_.t_start, slice_.t_end, cfg.bins + 1)
    zero = loss_and_grad(WarpWindow(slice_, FlowSequence.zeros(cfg.bins, *slice_.shape, edges[0], edges[-1])),
                         backend, False)[0]
    adam = Adam([pred.depth_params.shape, pred.pose_params.shape], cfg.learning_rate,
                cfg.beta1, cfg.beta2, cfg.adam_eps)
    rng = np.random.default_rng(cfg.seed)
    log = TrainLog()
    best, best_total, initial = pred.copy(), np.inf, None
    for update in range(cfg.max_updates + 1):
        t_begin = time.perf_counter()
        last = update == cfg.max_updates
        try:
            obj = predictor_objective(pred, slice_, k, cfg.lambda_geo, backend, need_grad=not last)
        except ValueError as err:
            if initial is None:
                raise
            raise DivergenceError(f"update {update}: parameters left the valid range ({err})") from err
        if initial is None:
            initial = obj.total
        if not np.isfinite(obj.total) or obj.total > cfg.divergence_factor * initial:
            raise DivergenceError(f"update {update}: loss {obj.total:.6g} diverged")
        if obj.total < best_total:
            best, best_total = pred.copy(), obj.total
        if last:
            break
        if cfg.gradcheck_every and update % cfg.gradcheck_every == 0:
            _spot_check(pred, slice_, k, cfg, backend, obj, rng)
        adam.step([pred.depth_params, pred.pose_params], [obj.d_depth_params, obj.d_pose_params])
        if not pred.rotation:
            pred.pose_params[:, :3] = 0.0
        log.append(
            update=update, window_start_us=slice_.t_start, l_cm=obj.l_cm, l_geo=obj.l_geo,
            total=obj.total, rsat=obj.l_cm / zero if zero else float("nan"),
            wall_time_s=time.perf_counter() - t_begin,
            grad_norm_depth=float(np.linalg.norm(obj.d_depth_params)),
            grad_norm_pose=float(np.linalg.norm(obj.d_pose_params)),
        )
    return (best, log) if return_log else best
