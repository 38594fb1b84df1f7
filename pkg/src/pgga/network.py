"""Three-branch pose-guided attention network.

A small strided backbone stands in for the paper-scale one while keeping
the /8 shadow and /16 branch geometry the masks rely on: masks multiply
the shadow features (coarse branch twice, at both scales; fine branch once
through per-part channel groups), channel attention re-weights branch
features, and grid pooling yields 8 reduced vectors per image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import saga as saga_mod
from .masks import KeypointSet, MaskParams, NUM_PARTS, coarse_mask, downsample_mask, fine_masks
from .tensor import (
    BatchNormState,
    ParameterSet,
    Tensor,
    add,
    as_tensor,
    batch_norm,
    conv2d,
    global_pool,
    logistic,
    matmul,
    mul,
    narrow,
    relu,
    reshape,
    stack,
    transpose,
)

__all__ = ["BackboneConfig", "FeatureBundle", "ForwardResult", "MaskStack", "PoseGuidedNet", "build_mask_stack", "round_half_up"]


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass
class BackboneConfig:
    """Shapes and split ratios for the desk-scale network."""

    image_height: int = 96
    image_width: int = 32
    shadow_channels: int = 32
    branch_channels: int = 64
    reduced_dim: int = 32
    coarse_split_fraction: float = 0.44
    fine_split_fractions: tuple[float, float, float] = (0.2, 0.4, 0.4)
    attention_reduction_ratio: int = 4
    channel_alloc: tuple[int, ...] = ()

    def __post_init__(self):
        H, W = self.image_height, self.image_width
        if H % 16 or W % 16:
            raise ValueError(f"image size {H}x{W} must be divisible by 16")
        if self.shadow_channels % 4:
            raise ValueError("shadow_channels must be divisible by 4 (three doubling stages)")
        if self.shadow_channels < NUM_PARTS:
            raise ValueError(f"shadow_channels must be at least {NUM_PARTS} for per-part channel groups")
        if self.branch_channels % 2:
            raise ValueError("branch_channels must be even")
        if self.reduced_dim < 1 or self.attention_reduction_ratio < 1:
            raise ValueError("reduced_dim and attention_reduction_ratio must be positive")
        if not 0.0 < self.coarse_split_fraction < 1.0:
            raise ValueError("coarse_split_fraction must lie in (0, 1)")
        fr = tuple(float(f) for f in self.fine_split_fractions)
        if len(fr) != 3 or min(fr) <= 0.0 or abs(sum(fr) - 1.0) > 1e-9:
            raise ValueError("fine_split_fractions must be 3 positive values summing to 1")
        self.fine_split_fractions = fr
        if self.channel_alloc:
            alloc = tuple(int(n) for n in self.channel_alloc)
            if len(alloc) != NUM_PARTS or min(alloc) < 1 or sum(alloc) != self.shadow_channels:
                raise ValueError(
                    f"channel_alloc must be {NUM_PARTS} positive counts summing to {self.shadow_channels}"
                )
            self.channel_alloc = alloc
        hf = self.branch_height
        b = self.coarse_boundary
        if not 1 <= b <= hf - 1:
            raise ValueError(f"coarse split at row {b} leaves an empty grid for height {hf}")
        b1, b2 = self.fine_boundaries
        if not (1 <= b1 < b2 <= hf - 1):
            raise ValueError(f"fine splits at rows {(b1, b2)} leave an empty grid for height {hf}")

    @property
    def grid_bounds(self) -> tuple[int, int]:
        return self.image_height // 8, self.image_width // 8

    @property
    def branch_height(self) -> int:
        return self.image_height // 16

    @property
    def coarse_boundary(self) -> int:
        return round_half_up(self.coarse_split_fraction * self.branch_height)

    @property
    def fine_boundaries(self) -> tuple[int, int]:
        hf = self.branch_height
        c1 = self.fine_split_fractions[0]
        c2 = c1 + self.fine_split_fractions[1]
        return round_half_up(c1 * hf), round_half_up(c2 * hf)

    def channel_allocation(self) -> tuple[int, ...]:
        """Floor division of shadow channels over 13 parts, remainder to the earliest."""
        if self.channel_alloc:
            return self.channel_alloc
        base, rem = divmod(self.shadow_channels, NUM_PARTS)
        return tuple(base + 1 if i < rem else base for i in range(NUM_PARTS))

    @property
    def descriptor_length(self) -> int:
        return 8 * self.reduced_dim


@dataclass
class FeatureBundle:
    """The 8 pooled branch vectors; batched, each tensor is B x d."""

    p_global: Tensor
    p_g_c: Tensor
    p_l_c: tuple[Tensor, Tensor]
    p_g_f: Tensor
    p_l_f: tuple[Tensor, Tensor, Tensor]

    def globals(self) -> list[Tensor]:
        return [self.p_global, self.p_g_c, self.p_g_f]

    def locals(self) -> list[Tensor]:
        # fixed node order: coarse locals then fine locals
        return [*self.p_l_c, *self.p_l_f]


@dataclass
class ForwardResult:
    bundle: FeatureBundle
    theta: np.ndarray  # (B, 5) detached weights, ones when the module is disabled
    weighted_locals: list[Tensor]  # 5 tensors of B x d

    def id_features(self) -> list[Tensor]:
        """Head inputs in descriptor order: 3 globals then 5 weighted locals."""
        return self.bundle.globals() + self.weighted_locals


@dataclass
class MaskStack:
    """Per-batch mask arrays aligned with the feature maps they multiply."""

    coarse: np.ndarray  # (B, 1, Hm, Wm)
    coarse_ds: np.ndarray  # (B, 1, Hm/2, Wm/2)
    fine_channels: np.ndarray  # (B, C_s, Hm, Wm)


def build_mask_stack(
    keypoint_sets: list[KeypointSet], params: MaskParams, cfg: BackboneConfig
) -> MaskStack:
    bounds = cfg.grid_bounds
    alloc = cfg.channel_allocation()
    coarse, coarse_ds, fine = [], [], []
    for kps in keypoint_sets:
        cm = coarse_mask(kps, params, bounds)
        coarse.append(cm.grid[None])
        coarse_ds.append(downsample_mask(cm)[None])
        grids = np.stack([m.grid for m in fine_masks(kps, params, bounds)])
        fine.append(np.repeat(grids, alloc, axis=0))
    return MaskStack(np.stack(coarse), np.stack(coarse_ds), np.stack(fine))


class ConvBnRelu:
    """3x3 (or 1x1) convolution, batch normalization, relu."""

    def __init__(self, params: ParameterSet, bn_states: dict, name: str, cin: int, cout: int,
                 stride: int, rng: np.random.Generator, ksize: int = 3):
        scale = math.sqrt(2.0 / (cin * ksize * ksize))
        self.w = params.add(f"{name}/w", rng.normal(0.0, scale, (cout, cin, ksize, ksize)))
        self.scale = params.add(f"{name}/scale", np.ones(cout))
        self.shift = params.add(f"{name}/shift", np.zeros(cout))
        self.bn = bn_states.setdefault(name, BatchNormState(cout))
        self.stride = stride
        self.pad = ksize // 2

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        y = conv2d(x, self.w, stride=self.stride, pad=self.pad)
        return relu(batch_norm(y, self.scale, self.shift, self.bn, mode))


class ChannelAttention:
    """Shared two-layer map over GAP and GMP vectors, summed, logistic gate."""

    def __init__(self, params: ParameterSet, name: str, channels: int, ratio: int, rng: np.random.Generator):
        hidden = max(1, channels // ratio)
        self.w1 = params.add(f"{name}/w1", rng.normal(0.0, math.sqrt(2.0 / channels), (hidden, channels)))
        self.w2 = params.add(f"{name}/w2", rng.normal(0.0, math.sqrt(2.0 / hidden), (channels, hidden)))

    def _map(self, v: Tensor) -> Tensor:
        return matmul(relu(matmul(v, transpose(self.w1))), transpose(self.w2))

    def __call__(self, x: Tensor) -> Tensor:
        squeeze = x.data.ndim == 3
        if squeeze:
            x = reshape(x, (1, *x.data.shape))
        s = logistic(add(self._map(global_pool(x, "avg")), self._map(global_pool(x, "max"))))
        out = mul(x, reshape(s, (*s.data.shape, 1, 1)))
        return reshape(out, out.data.shape[1:]) if squeeze else out


class Reduction:
    """1x1 convolution to d channels on a 1x1 map, batch norm, relu."""

    def __init__(self, params: ParameterSet, bn_states: dict, name: str, cin: int, dim: int,
                 rng: np.random.Generator):
        self.w = params.add(f"{name}/w", rng.normal(0.0, math.sqrt(2.0 / cin), (dim, cin, 1, 1)))
        self.scale = params.add(f"{name}/scale", np.ones(dim))
        self.shift = params.add(f"{name}/shift", np.zeros(dim))
        self.bn = bn_states.setdefault(name, BatchNormState(dim))
        self.dim = dim

    def __call__(self, v: Tensor, mode: str) -> Tensor:
        squeeze = v.data.ndim == 1
        if squeeze:
            v = reshape(v, (1, v.data.shape[0]))
        x = reshape(v, (*v.data.shape, 1, 1))
        y = relu(batch_norm(conv2d(x, self.w), self.scale, self.shift, self.bn, mode))
        out = reshape(y, y.data.shape[:2])
        return reshape(out, (self.dim,)) if squeeze else out


def _gap_gmp(x: Tensor) -> Tensor:
    return add(global_pool(x, "avg"), global_pool(x, "max"))


class PoseGuidedNet:
    """Shadow backbone plus global / coarse / fine branches and graph attention."""

    def __init__(
        self,
        cfg: BackboneConfig,
        rng: np.random.Generator,
        pose_masks: bool = True,
        channel_att: bool = True,
        saga: bool = True,
        saga_activation: str = "logistic",
    ):
        self.cfg = cfg
        self.use_pose_masks = pose_masks
        self.use_channel_att = channel_att
        self.use_saga = saga
        self.saga_activation = saga_activation
        self.params = ParameterSet()
        self.bn_states: dict[str, BatchNormState] = {}
        self.heads: list[Tensor] = []
        self.num_classes: int | None = None

        p, bns = self.params, self.bn_states
        cs, cb, d, r = cfg.shadow_channels, cfg.branch_channels, cfg.reduced_dim, cfg.attention_reduction_ratio
        self.shadow = [
            ConvBnRelu(p, bns, "shadow/s1", 3, cs // 4, 2, rng),
            ConvBnRelu(p, bns, "shadow/s2", cs // 4, cs // 2, 2, rng),
            ConvBnRelu(p, bns, "shadow/s3", cs // 2, cs, 2, rng),
        ]
        self.global_f1 = ConvBnRelu(p, bns, "global/f1", cs, cb // 2, 2, rng)
        self.global_f2 = ConvBnRelu(p, bns, "global/f2", cb // 2, cb, 1, rng)
        self.global_red = Reduction(p, bns, "global/red", cb, d, rng)

        self.coarse_f1 = ConvBnRelu(p, bns, "coarse/f1", cs, cb // 2, 2, rng)
        self.coarse_att1 = ChannelAttention(p, "coarse/att1", cb // 2, r, rng)
        self.coarse_f2 = ConvBnRelu(p, bns, "coarse/f2", cb // 2, cb, 1, rng)
        self.coarse_att2 = ChannelAttention(p, "coarse/att2", cb, r, rng)
        self.coarse_red_g = Reduction(p, bns, "coarse/red_g", cb, d, rng)
        self.coarse_red_l = [Reduction(p, bns, f"coarse/red_l{i}", cb, d, rng) for i in range(2)]

        self.fine_f1 = ConvBnRelu(p, bns, "fine/f1", cs, cb // 2, 2, rng)
        self.fine_att1 = ChannelAttention(p, "fine/att1", cb // 2, r, rng)
        self.fine_f2 = ConvBnRelu(p, bns, "fine/f2", cb // 2, cb, 1, rng)
        self.fine_att2 = ChannelAttention(p, "fine/att2", cb, r, rng)
        self.fine_red_g = Reduction(p, bns, "fine/red_g", cb, d, rng)
        self.fine_red_l = [Reduction(p, bns, f"fine/red_l{i}", cb, d, rng) for i in range(3)]

        self.saga_params = saga_mod.SagaParams(
            phi_a=p.add("saga/phi_a", rng.normal(0.0, 1.0 / math.sqrt(d), (d, d))),
            phi_b=p.add("saga/phi_b", rng.normal(0.0, 1.0 / math.sqrt(d), (d, d))),
            w=p.add("saga/w", np.zeros(d)),
        )

    def add_classifier_heads(self, num_classes: int, rng: np.random.Generator) -> None:
        """Eight bias-free heads, one per feature vector, in descriptor order."""
        if self.heads:
            raise RuntimeError("classifier heads already added")
        d = self.cfg.reduced_dim
        self.num_classes = num_classes
        scale = 1.0 / math.sqrt(d)
        self.heads = [
            self.params.add(f"head/{i}/w", rng.normal(0.0, scale, (num_classes, d))) for i in range(8)
        ]

    # ----- branch pieces ---------------------------------------------------

    def shadow_forward(self, image: Tensor | np.ndarray, mode: str) -> Tensor:
        """3 -> C_s features at 1/8 scale via three stride-2 stages."""
        x = as_tensor(image)
        squeeze = x.data.ndim == 3
        if squeeze:
            x = reshape(x, (1, *x.data.shape))
        _, _, H, W = x.data.shape
        if H % 16 or W % 16:
            raise ValueError(f"image size {H}x{W} must be divisible by 16")
        for stage in self.shadow:
            x = stage(x, mode)
        return reshape(x, x.data.shape[1:]) if squeeze else x

    def global_branch(self, p_ini: Tensor, mode: str) -> Tensor:
        f = self.global_f2(self.global_f1(p_ini, mode), mode)
        return self.global_red(_gap_gmp(f), mode)

    def _grid_locals(self, feat: Tensor, boundaries: tuple[int, ...], reducers, mode: str) -> list[Tensor]:
        """GAP over horizontal row grids, one reduction head per grid."""
        hf = feat.data.shape[2]
        edges = (0, *boundaries, hf)
        out = []
        for i, red in enumerate(reducers):
            grid = narrow(feat, 2, edges[i], edges[i + 1] - edges[i])
            out.append(red(global_pool(grid, "avg"), mode))
        return out

    def coarse_branch(
        self, p_ini: Tensor, mask: np.ndarray | None, mask_ds: np.ndarray | None, mode: str
    ) -> tuple[Tensor, list[Tensor]]:
        x = p_ini
        if mask is not None:
            if mask.shape[-2:] != p_ini.data.shape[-2:]:
                raise ValueError(
                    f"coarse mask {mask.shape[-2:]} does not match features {p_ini.data.shape[-2:]}"
                )
            x = mul(x, Tensor(mask))
        t1 = self.coarse_f1(x, mode)
        if self.use_channel_att:
            t1 = self.coarse_att1(t1)
        if mask_ds is not None:
            if mask_ds.shape[-2:] != t1.data.shape[-2:]:
                raise ValueError(
                    f"downsampled mask {mask_ds.shape[-2:]} does not match features {t1.data.shape[-2:]}"
                )
            t1 = mul(t1, Tensor(mask_ds))
        p_c = self.coarse_f2(t1, mode)
        if self.use_channel_att:
            p_c = self.coarse_att2(p_c)
        p_g = self.coarse_red_g(_gap_gmp(p_c), mode)
        locals_ = self._grid_locals(p_c, (self.cfg.coarse_boundary,), self.coarse_red_l, mode)
        return p_g, locals_

    def assemble_fine_input(self, p_ini: Tensor, fine_channel_mask: np.ndarray | None) -> Tensor:
        """Multiply contiguous per-part channel groups by their part masks."""
        if fine_channel_mask is None:
            return p_ini
        if fine_channel_mask.shape[-3:] != p_ini.data.shape[-3:]:
            raise ValueError(
                f"fine channel mask {fine_channel_mask.shape} does not match features {p_ini.data.shape}"
            )
        return mul(p_ini, Tensor(fine_channel_mask))

    def fine_branch(self, p_ini_f: Tensor, mode: str) -> tuple[Tensor, list[Tensor]]:
        t1 = self.fine_f1(p_ini_f, mode)
        if self.use_channel_att:
            t1 = self.fine_att1(t1)
        p_f = self.fine_f2(t1, mode)
        if self.use_channel_att:
            p_f = self.fine_att2(p_f)
        p_g = self.fine_red_g(_gap_gmp(p_f), mode)
        locals_ = self._grid_locals(p_f, self.cfg.fine_boundaries, self.fine_red_l, mode)
        return p_g, locals_

    # ----- full forward ----------------------------------------------------

    def forward(self, images: Tensor | np.ndarray, masks: MaskStack | None, mode: str) -> ForwardResult:
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        x = as_tensor(images)
        if x.data.ndim != 4:
            raise ValueError(f"expected batched images B x 3 x H x W, got shape {x.data.shape}")
        if not self.use_pose_masks:
            masks = None
        p_ini = self.shadow_forward(x, mode)
        p_global = self.global_branch(p_ini, mode)
        p_g_c, p_l_c = self.coarse_branch(
            p_ini,
            masks.coarse if masks else None,
            masks.coarse_ds if masks else None,
            mode,
        )
        p_ini_f = self.assemble_fine_input(p_ini, masks.fine_channels if masks else None)
        p_g_f, p_l_f = self.fine_branch(p_ini_f, mode)
        bundle = FeatureBundle(p_global, p_g_c, tuple(p_l_c), p_g_f, tuple(p_l_f))
        theta, weighted = self._apply_saga(bundle)
        return ForwardResult(bundle=bundle, theta=theta, weighted_locals=weighted)

    def _apply_saga(self, bundle: FeatureBundle) -> tuple[np.ndarray, list[Tensor]]:
        locals_ = bundle.locals()
        B = locals_[0].data.shape[0]
        if not self.use_saga:
            return np.ones((B, 5)), locals_
        theta_rows, weighted_rows = [], []
        for b in range(B):
            nodes = stack([reshape(narrow(v, 0, b, 1), (v.data.shape[1],)) for v in locals_])
            out = saga_mod.saga_apply(nodes, self.saga_params, self.saga_activation)
            theta_rows.append(out.theta.data.copy())
            weighted_rows.append(out.weighted)
        weighted = [
            stack([reshape(narrow(w, 0, i, 1), (w.data.shape[1],)) for w in weighted_rows])
            for i in range(5)
        ]
        return np.stack(theta_rows), weighted

    # ----- inference helpers -----------------------------------------------

    def descriptors(self, images: np.ndarray, masks: MaskStack | None) -> tuple[np.ndarray, np.ndarray]:
        """Eval-mode concatenated descriptors (B x 8d) and theta values (B x 5)."""
        result = self.forward(images, masks, "eval")
        parts = [t.data for t in result.id_features()]
        return np.concatenate(parts, axis=1), result.theta

    # ----- state dict ------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {name: t.data.copy() for name, t in self.params.items()}
        for name, st in self.bn_states.items():
            if st.initialized:
                out[f"bn/{name}/mean"] = st.running_mean.copy()
                out[f"bn/{name}/var"] = st.running_var.copy()
        return out

    def load_state_arrays(self, entries: dict[str, np.ndarray]) -> None:
        for name, t in self.params.items():
            if name not in entries:
                raise KeyError(f"checkpoint missing parameter {name!r}")
            arr = np.asarray(entries[name], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ValueError(f"parameter {name!r} shape {arr.shape} != expected {t.data.shape}")
            t.data = arr.copy()
        for name, st in self.bn_states.items():
            mkey, vkey = f"bn/{name}/mean", f"bn/{name}/var"
            if mkey in entries:
                st.running_mean = np.asarray(entries[mkey], dtype=np.float64).copy()
                st.running_var = np.asarray(entries[vkey], dtype=np.float64).copy()
