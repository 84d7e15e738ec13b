"""Adam optimization of flow fields: explicit rasterized mode and INR mode.

Both loops minimize the same total objective each step, differing only in
what carries the parameters — the raw field tensors themselves, or the
parameter vectors of the coordinate MLPs that generate the fields.
"""

import csv
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import inr, losses, warp
from . import tensor as T
from .guidance import AugmentationPolicy, GuidanceScorer
from .losses import LossWeights, RandomProjectionEmbedder


class ConfigError(ValueError):
    pass


class Adam:
    """Standard bias-corrected Adam over a list of parameter tensors.

    Learning rate halves every ``halve_every`` steps (0 disables decay):
    lr(t) = lr0 * 0.5^(t // halve_every) with t counted from 0.
    """

    def __init__(self, params, lr, halve_every=0, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr0 = lr
        self.halve_every = halve_every
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def current_lr(self):
        if self.halve_every <= 0:
            return self.lr0
        return self.lr0 * 0.5 ** (self.t // self.halve_every)

    def step(self):
        lr = self.current_lr()
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * (g * g)
            m_hat = self.m[i] / (1 - b1**self.t)
            v_hat = self.v[i] / (1 - b2**self.t)
            p.data -= (lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


@dataclass
class EditConfig:
    """One editing run: mode, schedule, weights, field post-processing.

    The mode constrains the config: explicit fields need a positive odd blur
    kernel and no L2 regularizer; INR fields are smooth by construction, so
    no blur and a positive regularizer.
    """

    guidance: GuidanceScorer
    mode: str = "inr"
    iterations: int = 3000
    lr: float = 1e-2
    halve_every: int = 1000
    weights: LossWeights = dc_field(default_factory=LossWeights)
    blur_kernel: int = 0
    alpha: float = 1.0
    seed: int = 0
    color_edit: bool = True
    augment: AugmentationPolicy = None
    augment_n: int = 4
    # INR architecture (ignored in explicit mode)
    encode_levels: int = 4
    spatial_dims: tuple = (18, 32, 32, 2)
    color_dims: tuple = (18, 16, 16, 1)
    max_displacement: float = None  # None -> 0.1 * min(H, W)

    def validate(self):
        if self.mode not in ("explicit", "inr"):
            raise ConfigError(f"mode must be 'explicit' or 'inr', got {self.mode!r}")
        if self.iterations < 0:
            raise ConfigError(f"iterations must be >= 0, got {self.iterations}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        try:
            self.weights.validate()
        except ValueError as exc:
            raise ConfigError(str(exc))
        if self.mode == "explicit":
            if self.blur_kernel <= 0 or self.blur_kernel % 2 == 0:
                raise ConfigError(
                    f"explicit mode requires an odd blur kernel > 0, got {self.blur_kernel}"
                )
            if self.weights.reg != 0:
                raise ConfigError(
                    f"explicit mode requires reg weight 0, got {self.weights.reg}"
                )
        else:
            if self.blur_kernel != 0:
                raise ConfigError(
                    f"inr mode requires blur kernel 0, got {self.blur_kernel}"
                )
            if self.weights.reg <= 0:
                raise ConfigError(
                    f"inr mode requires reg weight > 0, got {self.weights.reg}"
                )
        return self


@dataclass
class EditResult:
    edited: np.ndarray
    flow: np.ndarray
    cflow: np.ndarray
    trace: list
    spatial_field: inr.InrField = None
    color_field: inr.InrField = None


def _identity_result(image):
    h, w = image.shape[:2]
    return EditResult(
        edited=image.copy(),
        flow=np.zeros((h, w, 2), dtype=np.float32),
        cflow=np.zeros((h, w, 1), dtype=np.float32),
        trace=[],
    )


def _run_loop(image, prompt, config, make_fields, snapshot_extra=None):
    """Shared optimization loop; ``make_fields`` builds the effective fields
    as graph tensors each step and exposes the trainable leaves."""
    image = np.asarray(image, dtype=np.float32)
    if config.iterations == 0:
        return _identity_result(image)

    params, effective = make_fields
    adam = Adam(params, config.lr, config.halve_every)
    embedder = RandomProjectionEmbedder()
    trace = []
    best = None

    for step in range(config.iterations):
        lr_now = adam.current_lr()
        flow_eff, cflow_eff = effective()
        total, parts, edited = losses.total_loss(
            image,
            prompt,
            flow_eff,
            cflow_eff,
            config.weights,
            config.guidance,
            embedder=embedder,
            augment=config.augment,
            augment_n=config.augment_n,
        )
        parts["step"] = step
        parts["lr"] = lr_now
        trace.append(parts)
        if best is None or parts["total"] < best[0]:
            extra = snapshot_extra() if snapshot_extra is not None else None
            best = (
                parts["total"],
                edited.data.copy(),
                flow_eff.data.copy(),
                cflow_eff.data.copy(),
                extra,
            )
        total.backward()
        adam.step()
        adam.zero_grad()

    _, edited_best, flow_best, cflow_best, extra = best
    result = EditResult(
        edited=edited_best, flow=flow_best, cflow=cflow_best, trace=trace
    )
    if extra is not None:
        result.spatial_field, result.color_field = extra
    return result


def run_iterative_explicit(image, prompt, config):
    """Optimize raw (H,W,2) and (H,W,1) field tensors directly (zero-init)."""
    config.validate()
    if config.mode != "explicit":
        raise ConfigError(f"run_iterative_explicit needs mode='explicit', got {config.mode!r}")
    image = np.asarray(image, dtype=np.float32)
    h, w = image.shape[:2]

    flow_raw = T.Tensor(np.zeros((h, w, 2), np.float32), requires_grad=True)
    cflow_raw = T.Tensor(np.zeros((h, w, 1), np.float32), requires_grad=config.color_edit)
    params = [flow_raw] + ([cflow_raw] if config.color_edit else [])

    def effective():
        flow_eff = warp.smooth_and_scale(flow_raw, config.blur_kernel, config.alpha)
        if config.color_edit:
            cflow_eff = warp.smooth_and_scale(cflow_raw, config.blur_kernel, config.alpha)
        else:
            cflow_eff = T.Tensor(np.zeros((h, w, 1), np.float32))
        return flow_eff, cflow_eff

    return _run_loop(image, prompt, config, (params, effective))


def run_iterative_inr(image, prompt, config):
    """Optimize the parameter vectors of the two coordinate MLPs."""
    config.validate()
    if config.mode != "inr":
        raise ConfigError(f"run_iterative_inr needs mode='inr', got {config.mode!r}")
    image = np.asarray(image, dtype=np.float32)
    h, w = image.shape[:2]
    d = config.max_displacement
    if d is None:
        d = 0.1 * min(h, w)

    f_s = inr.init_params(list(config.spatial_dims), config.seed, config.encode_levels, d)
    f_c = inr.init_params(list(config.color_dims), config.seed + 1, config.encode_levels, 1.0)
    theta_s = T.Tensor(f_s.theta.copy(), requires_grad=True)
    theta_c = T.Tensor(f_c.theta.copy(), requires_grad=config.color_edit)
    params = [theta_s] + ([theta_c] if config.color_edit else [])

    def effective():
        flow_field = inr.inr_forward_graph(
            f_s.dims, f_s.levels, theta_s, h, w, f_s.out_scale
        )
        flow_eff = warp.smooth_and_scale(flow_field, 0, config.alpha)
        if config.color_edit:
            cfield = inr.inr_forward_graph(f_c.dims, f_c.levels, theta_c, h, w, 1.0)
            cflow_eff = warp.smooth_and_scale(cfield, 0, config.alpha)
        else:
            cflow_eff = T.Tensor(np.zeros((h, w, 1), np.float32))
        return flow_eff, cflow_eff

    def snapshot():
        return (
            inr.InrField(list(f_s.dims), f_s.levels, theta_s.data.copy(), f_s.out_scale),
            inr.InrField(list(f_c.dims), f_c.levels, theta_c.data.copy(), 1.0),
        )

    return _run_loop(image, prompt, config, (params, effective), snapshot_extra=snapshot)


TRACE_FIELDS = ["step", "total", "clip", "sm", "reg", "color", "id", "lr"]


def write_trace_csv(path, trace):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=TRACE_FIELDS, extrasaction="ignore")
        writer.writeheader()
        for row in trace:
            writer.writerow(row)
