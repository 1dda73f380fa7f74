"""Training loop: image loss, anisotropy regularizer, Adam, and density control.

The optimizer follows the classic point-primitive recipe: Adam with
per-parameter-group learning rates, exponentially decayed position rate,
log-space scale updates, quaternion renormalization after each step, and a
periodic adaptive density control (ADC) pass that clones small primitives
under high positional gradient, splits large or saturated ones (children
get their density halved), and prunes the nearly transparent or oversized.
"""

import math
import time
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from . import batched, sh
from .errors import TrainingDivergedError
from .scene import (
    ALPHA_MAX,
    Scene,
    SceneArrays,
    alpha_from_sigma,
    quats_to_matrices,
    sigmas_from_alphas,
)

SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 10.0 / 3.0  # 11x11 window at sigma 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def _blur(x):
    return gaussian_filter(x, sigma=SSIM_SIGMA, truncate=SSIM_TRUNCATE, mode="constant", axes=(0, 1))


def ssim(image: np.ndarray, target: np.ndarray, want_grad: bool = False):
    """Mean structural similarity over an (H, W, 3) pair in [0, 1]-ish range.

    With want_grad, also returns d(ssim)/d(image). Uses an 11x11 Gaussian
    window (sigma 1.5) with zero padding; the window is self-adjoint, so
    the gradient reuses the same blur.
    """
    x = np.asarray(image, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    mu_x = _blur(x)
    mu_y = _blur(y)
    gxx = _blur(x * x)
    gxy = _blur(x * y)
    gyy = _blur(y * y)
    var_x = gxx - mu_x * mu_x
    var_y = gyy - mu_y * mu_y
    cov = gxy - mu_x * mu_y
    a1 = 2.0 * mu_x * mu_y + SSIM_C1
    a2 = 2.0 * cov + SSIM_C2
    b1 = mu_x * mu_x + mu_y * mu_y + SSIM_C1
    b2 = var_x + var_y + SSIM_C2
    s_map = (a1 * a2) / (b1 * b2)
    value = float(np.mean(s_map))
    if not want_grad:
        return value
    # Chain through the three blurred moments of x.
    w = 1.0 / s_map.size
    denom = b1 * b2
    ds_dmu = w * ((2.0 * mu_y * a2 - 2.0 * mu_y * a1) / denom - s_map * (2.0 * mu_x / b1 - 2.0 * mu_x / b2))
    ds_dgxx = w * (-s_map / b2)
    ds_dgxy = w * (2.0 * a1 / denom)
    grad = _blur(ds_dmu) + 2.0 * x * _blur(ds_dgxx) + y * _blur(ds_dgxy)
    return value, grad


def image_loss(image: np.ndarray, target: np.ndarray, lambda_dssim: float = 0.2):
    """L1 mean plus lambda * (1 - SSIM) / 2; returns (value, d/d image)."""
    image = np.asarray(image, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if image.shape != target.shape:
        raise ValueError(f"shape mismatch {image.shape} vs {target.shape}")
    diff = image - target
    l1 = float(np.mean(np.abs(diff)))
    grad = np.sign(diff) / diff.size
    if lambda_dssim != 0.0:
        s, ds = ssim(image, target, want_grad=True)
        value = l1 + lambda_dssim * (1.0 - s) / 2.0
        grad = grad - (lambda_dssim / 2.0) * ds
    else:
        value = l1
    return value, grad


def psnr(image: np.ndarray, target: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(image) - np.asarray(target)) ** 2))
    if mse == 0:
        return math.inf
    return -10.0 * math.log10(mse)


def anisotropy_loss(arrays: SceneArrays, visible_mask: np.ndarray):
    """Penalty sum(stopgrad(1 - alpha) * (max(s) - min(s))) over visible primitives.

    Returns (value, d_scale). The (1 - alpha) weight is gradient-blocked,
    so only the scale receives a gradient.
    """
    if arrays.count == 0:
        return 0.0, np.zeros((0, 3))
    weight = np.where(visible_mask, 1.0 - arrays.alphas, 0.0)
    hi = np.argmax(arrays.scales, axis=1)
    lo = np.argmin(arrays.scales, axis=1)
    spread = arrays.scales[np.arange(arrays.count), hi] - arrays.scales[np.arange(arrays.count), lo]
    value = float(np.sum(weight * spread))
    d_scale = np.zeros_like(arrays.scales)
    np.add.at(d_scale, (np.arange(arrays.count), hi), weight)
    np.add.at(d_scale, (np.arange(arrays.count), lo), -weight)
    return value, d_scale


@dataclass
class TrainConfig:
    max_steps: int = 5000
    lr_alpha: float = 0.0125
    lr_position_init: float = 4e-5
    lr_position_final: float = 4e-7
    lr_scale: float = 0.005  # applied in log-scale space
    lr_quat: float = 0.001
    lr_sh: float = 0.0025
    lr_sh_rest_divisor: float = 20.0
    percent_dense: float = 0.001785
    densify_interval: int = 200
    densify_start: int = 1500
    densify_stop_step: int = 16000
    max_primitives: int = 7_000_000
    split_grad_threshold: float = 2.5e-7
    clone_grad_threshold: float = 0.1
    sh_degree_interval: int = 2000
    max_primitive_size: float = 25.0
    lambda_dssim: float = 0.2
    lambda_aniso: float = 0.01
    prune_alpha: float = 0.005
    split_scale_divisor: float = 1.6
    clone_offset_fraction: float = 0.1
    t_stop: float = 1e-4
    spp: int = 1
    jitter: bool = True
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-15
    dtype: str = "float32"  # render/backward precision of the hot loop
    # Exponential decay target for the non-position learning rates: they
    # reach lr * lr_final_scale at max_steps. 1.0 keeps them constant.
    lr_final_scale: float = 1.0

    def __post_init__(self):
        positive = (
            "lr_alpha lr_position_init lr_position_final lr_scale lr_quat lr_sh "
            "percent_dense densify_interval max_primitives split_grad_threshold "
            "clone_grad_threshold sh_degree_interval max_primitive_size split_scale_divisor"
        )
        for name in positive.split():
            if getattr(self, name) <= 0:
                raise ValueError(f"TrainConfig.{name} must be positive")
        if self.densify_start >= self.densify_stop_step:
            raise ValueError("densify_start must precede densify_stop_step")


def scene_extent_of(cameras) -> float:
    """Radius of the camera bounding sphere, with the usual 1.1 headroom."""
    centers = np.stack([c.position for c in cameras])
    centroid = centers.mean(axis=0)
    return 1.1 * float(np.max(np.linalg.norm(centers - centroid, axis=1))) or 1.0


class _Params:
    """Mutable structure-of-arrays training state."""

    def __init__(self, scene: Scene):
        arrays = SceneArrays.from_scene(scene)
        self.means = arrays.means.copy()
        self.quats = arrays.quats.copy()
        self.log_scales = np.log(arrays.scales)
        self.alphas = arrays.alphas.copy()
        self.sh_coeffs = arrays.sh_coeffs.copy()
        self.background = arrays.background.copy()
        self.sh_degree_active = arrays.sh_degree_active

    @property
    def count(self):
        return self.means.shape[0]

    @property
    def max_degree(self):
        return int(math.isqrt(self.sh_coeffs.shape[1])) - 1

    def arrays(self) -> SceneArrays:
        scales = np.exp(self.log_scales)
        return SceneArrays(
            means=self.means,
            quats=self.quats,
            rotations=quats_to_matrices(self.quats),
            scales=scales,
            alphas=self.alphas,
            sigmas=sigmas_from_alphas(self.alphas, scales),
            sh_coeffs=self.sh_coeffs,
            background=self.background,
            sh_degree_active=self.sh_degree_active,
        )

    def to_scene(self) -> Scene:
        return self.arrays().to_scene()


class AdamState:
    """Per-parameter-group first/second moments."""

    GROUPS = ("mean", "quat", "scale", "alpha", "sh")

    def __init__(self, params: _Params, step: int = 0):
        self.t = step
        self.m = {}
        self.v = {}
        shapes = {
            "mean": params.means.shape,
            "quat": params.quats.shape,
            "scale": params.log_scales.shape,
            "alpha": params.alphas.shape,
            "sh": params.sh_coeffs.shape,
        }
        for name, shape in shapes.items():
            self.m[name] = np.zeros(shape)
            self.v[name] = np.zeros(shape)

    def update(self, name, grad, lr, beta1, beta2, eps):
        m = self.m[name]
        v = self.v[name]
        m *= beta1
        m += (1 - beta1) * grad
        v *= beta2
        v += (1 - beta2) * grad * grad
        mhat = m / (1 - beta1**self.t)
        vhat = v / (1 - beta2**self.t)
        return -lr * mhat / (np.sqrt(vhat) + eps)

    def remap(self, params: _Params, index_map: np.ndarray):
        """Carry moments through an ADC step; fresh primitives start at zero."""
        fresh = AdamState(params, self.t)
        keep = index_map >= 0
        src = index_map[keep]
        for name in self.GROUPS:
            fresh.m[name][keep] = self.m[name][src]
            fresh.v[name][keep] = self.v[name][src]
        self.m = fresh.m
        self.v = fresh.v

    def export(self) -> dict:
        out = {"t": np.array([self.t], dtype=np.float64)}
        for name in self.GROUPS:
            out[f"m_{name}"] = self.m[name]
            out[f"v_{name}"] = self.v[name]
        return out

    def load(self, arrays: dict):
        self.t = int(arrays["t"][0])
        for name in self.GROUPS:
            self.m[name] = arrays[f"m_{name}"].reshape(self.m[name].shape).astype(np.float64)
            self.v[name] = arrays[f"v_{name}"].reshape(self.v[name].shape).astype(np.float64)


@dataclass
class AdcReport:
    cloned: int = 0
    split: int = 0
    split_saturated: int = 0
    pruned: int = 0


def adc_step(
    params: _Params,
    stat_norm: np.ndarray,
    stat_vec: np.ndarray,
    visibility: np.ndarray,
    config: TrainConfig,
    scene_extent: float,
    rng,
):
    """One adaptive density control pass on the SoA parameters.

    Returns (index_map, AdcReport); index_map[i] is the source primitive of
    new slot i, or -1 for newly created ones. Decision order per primitive:
    prune, then split (gradient- or saturation-triggered), then clone.
    """
    p = params.count
    scales = np.exp(params.log_scales)
    size = scales.max(axis=1)
    min_s = scales.min(axis=1)
    sigmas = sigmas_from_alphas(params.alphas, scales)
    g = np.where(visibility > 0, stat_norm / np.maximum(visibility, 1), 0.0)

    prune = (params.alphas < config.prune_alpha) | (size > config.max_primitive_size)
    dense_cut = config.percent_dense * scene_extent
    saturated = 0.99 < -np.expm1(-sigmas * size)  # opacity across the major axis
    room = p < config.max_primitives
    split = (~prune) & room & (((g > config.split_grad_threshold) & (size >= dense_cut)) | saturated)
    clone = (~prune) & (~split) & room & (g > config.clone_grad_threshold) & (size < dense_cut)

    keep = ~prune & ~split
    keep_idx = np.where(keep)[0]
    clone_idx = np.where(clone)[0]
    split_idx = np.where(split)[0]

    new_means = [params.means[keep_idx]]
    new_quats = [params.quats[keep_idx]]
    new_logs = [params.log_scales[keep_idx]]
    new_alphas = [params.alphas[keep_idx]]
    new_sh = [params.sh_coeffs[keep_idx]]
    index_map = [keep_idx]

    if len(clone_idx):
        # The copy is nudged along the accumulated positional gradient.
        vec = stat_vec[clone_idx]
        norm = np.linalg.norm(vec, axis=1, keepdims=True)
        direction = np.where(norm > 0, vec / np.where(norm > 0, norm, 1.0), 0.0)
        offset = direction * (config.clone_offset_fraction * size[clone_idx, None])
        new_means.append(params.means[clone_idx] + offset)
        new_quats.append(params.quats[clone_idx])
        new_logs.append(params.log_scales[clone_idx])
        new_alphas.append(params.alphas[clone_idx])
        new_sh.append(params.sh_coeffs[clone_idx])
        index_map.append(np.full(len(clone_idx), -1, dtype=np.int64))

    if len(split_idx):
        rot = quats_to_matrices(params.quats[split_idx])
        child_scales = scales[split_idx] / config.split_scale_divisor
        child_alphas = np.array(
            [
                alpha_from_sigma(sigmas[i] / 2.0, child_scales[k])
                for k, i in enumerate(split_idx)
            ]
        )
        for _ in range(2):
            local = rng.normal(size=(len(split_idx), 3)) * scales[split_idx]
            offset = np.einsum("pij,pj->pi", rot, local)
            new_means.append(params.means[split_idx] + offset)
            new_quats.append(params.quats[split_idx])
            new_logs.append(np.log(child_scales))
            new_alphas.append(child_alphas)
            new_sh.append(params.sh_coeffs[split_idx])
            index_map.append(np.full(len(split_idx), -1, dtype=np.int64))

    params.means = np.concatenate(new_means)
    params.quats = np.concatenate(new_quats)
    params.log_scales = np.concatenate(new_logs)
    params.alphas = np.concatenate(new_alphas)
    params.sh_coeffs = np.concatenate(new_sh)
    report = AdcReport(
        cloned=len(clone_idx),
        split=int(np.sum(split & ~saturated)),
        split_saturated=int(np.sum(split & saturated)),
        pruned=int(np.sum(prune)),
    )
    return np.concatenate(index_map), report


def _camera_rays(camera, rng, jitter):
    ys, xs = np.meshgrid(
        np.arange(camera.height, dtype=np.float64),
        np.arange(camera.width, dtype=np.float64),
        indexing="ij",
    )
    px = xs.reshape(-1)
    py = ys.reshape(-1)
    if jitter:
        off = rng.random((px.size, 2))
    else:
        off = np.full((px.size, 2), 0.5)
    from .geometry import generate_rays

    return generate_rays(camera, px + off[:, 0], py + off[:, 1])


def train(
    scene: Scene,
    dataset: list,
    config: TrainConfig | None = None,
    start_step: int = 0,
    adam_state: AdamState | None = None,
    stop_step: int | None = None,
    on_step=None,
):
    """Optimize the scene against posed images.

    dataset is a list of (CameraModel, image) training views. Returns
    (trained Scene, metrics) where metrics is a list of per-step dicts
    (step, loss, psnr, n_primitives, fps). Deterministic for a fixed seed:
    each step's randomness is derived from (seed, step), so a resumed run
    continues the same stream. stop_step pauses a run early while keeping
    the schedules pinned to max_steps (for checkpoint/resume).
    """
    config = config or TrainConfig()
    if not dataset:
        raise ValueError("dataset must contain at least one posed image")
    params = _Params(scene)
    adam = adam_state or AdamState(params)
    cameras = [cam for cam, _ in dataset]
    extent = scene_extent_of(cameras)
    dtype = np.dtype(config.dtype)

    stat_norm = np.zeros(params.count)
    stat_vec = np.zeros((params.count, 3))
    visibility = np.zeros(params.count, dtype=np.int64)
    metrics = []
    end_step = config.max_steps if stop_step is None else min(stop_step, config.max_steps)

    for step in range(start_step, end_step):
        t0 = time.perf_counter()
        rng = np.random.Generator(
            np.random.Philox(np.random.SeedSequence(entropy=config.seed, spawn_key=(step,)))
        )
        camera, target = dataset[int(rng.integers(len(dataset)))]
        arrays = params.arrays().astype(dtype)
        origins, dirs = _camera_rays(camera, rng, config.jitter)
        result = batched.forward(
            arrays, origins, dirs, t_stop=config.t_stop, want_tape=True, want_weights=True
        )
        image = result.colors.reshape(camera.height, camera.width, 3)
        loss_value, dl_dimage = image_loss(image, target, config.lambda_dssim)
        visible = result.weights.sum(axis=0) > 0.0
        aniso_value, aniso_dscale = anisotropy_loss(arrays, visible)
        loss_value += config.lambda_aniso * aniso_value
        if not math.isfinite(loss_value):
            raise TrainingDivergedError(f"non-finite loss at step {step}")

        grads = batched.backward(result.tape, dl_dimage.reshape(-1, 3), weights=result.weights)
        d_scale = grads.d_scale + config.lambda_aniso * aniso_dscale
        d_log_scale = d_scale * np.exp(params.log_scales)

        adam.t += 1
        progress = step / config.max_steps
        lr_pos = extent * config.lr_position_init * (
            config.lr_position_final / config.lr_position_init
        ) ** progress
        decay = config.lr_final_scale**progress
        b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_eps
        params.means += adam.update("mean", grads.d_mean, lr_pos, b1, b2, eps)
        params.quats += adam.update("quat", grads.d_quat, decay * config.lr_quat, b1, b2, eps)
        params.quats /= np.linalg.norm(params.quats, axis=1, keepdims=True)
        params.log_scales += adam.update("scale", d_log_scale, decay * config.lr_scale, b1, b2, eps)
        params.alphas += adam.update("alpha", grads.d_alpha, decay * config.lr_alpha, b1, b2, eps)
        params.alphas = np.clip(params.alphas, 0.0, ALPHA_MAX)
        sh_update = adam.update("sh", grads.d_sh, decay * config.lr_sh, b1, b2, eps)
        # Adam is gradient-scale invariant, so the lower rate for the
        # view-dependent coefficients is applied to the update itself.
        sh_update[:, 1:, :] /= config.lr_sh_rest_divisor
        params.sh_coeffs += sh_update

        stat_norm += grads.mean_grad_norm_sum
        stat_vec += grads.d_mean
        visibility += grads.visibility_count

        adc_report = None
        next_step = step + 1
        if (
            config.densify_start <= next_step <= config.densify_stop_step
            and next_step % config.densify_interval == 0
            and params.count < config.max_primitives
        ):
            index_map, adc_report = adc_step(
                params, stat_norm, stat_vec, visibility, config, extent, rng
            )
            adam.remap(params, index_map)
            stat_norm = np.zeros(params.count)
            stat_vec = np.zeros((params.count, 3))
            visibility = np.zeros(params.count, dtype=np.int64)

        if next_step % config.sh_degree_interval == 0:
            params.sh_degree_active = min(params.sh_degree_active + 1, params.max_degree)

        elapsed = time.perf_counter() - t0
        row = {
            "step": step,
            "loss": loss_value,
            "psnr": psnr(image, target),
            "n_primitives": params.count,
            "fps": 1.0 / elapsed if elapsed > 0 else math.inf,
        }
        metrics.append(row)
        if on_step is not None:
            on_step(step, params, row, adc_report)

    return params.to_scene(), metrics, adam
