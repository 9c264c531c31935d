"""BagNet architectures: bottleneck feature extractors whose topmost
features see at most q x q input pixels, a per-location linear
classifier, and linear spatial aggregation to image logits.

Two routes compute the same evidence map: `forward_evidence` (one pass
over the whole image) and `patch_oracle_evidence` (every q x q patch
cropped out and classified independently). The oracle is the semantic
definition; equality of the two is asserted by tests rather than
assumed.

All convolutions inside blocks use zero padding 0, which is what makes
the per-patch reading exact; only the stem may pad, and stem padding is
equivalent to padding the input image. Blocks whose 3x3 middle conv
shrinks the main path crop the shortcut to the top-left to match.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .autodiff import (
    BatchNormState,
    Parameter,
    Tensor,
    batch_norm,
    conv2d,
    crop2d,
    fanin_normal,
    linear,
    relu,
    residual_add,
    softmax,
    spatial_mean,
)


class ConfigError(ValueError):
    """Configuration violates a structural invariant (fails fast)."""


@dataclass(frozen=True)
class BlockSpec:
    """One bottleneck block: 1x1 reduce, k x k middle conv (k in {1,3},
    carries the stride), 1x1 expand to 4x the middle width."""
    in_channels: int
    mid_channels: int
    out_channels: int
    kernel: int
    stride: int

    def __post_init__(self):
        if self.out_channels != 4 * self.mid_channels:
            raise ConfigError("block expansion must be 4x the middle width")
        if self.kernel not in (1, 3):
            raise ConfigError("middle kernel must be 1 or 3")
        if self.stride not in (1, 2):
            raise ConfigError("block stride must be 1 or 2")

    @property
    def needs_shortcut_conv(self) -> bool:
        return self.stride == 2 or self.in_channels != self.out_channels


@dataclass(frozen=True)
class BagNetConfig:
    q: int
    stem: tuple[int, int, int, int]  # (kernel, stride, pad, channels)
    blocks: tuple[BlockSpec, ...]
    num_classes: int
    input_size: int
    feature_dim: int
    name: str = "custom"

    def __post_init__(self):
        k, s, p, c = self.stem
        if k not in (1, 3):
            raise ConfigError("stem kernel must be 1 or 3")
        if s < 1 or p < 0 or c < 1:
            raise ConfigError("bad stem geometry")
        prev = c
        for b in self.blocks:
            if b.in_channels != prev:
                raise ConfigError(f"block input {b.in_channels} != previous output {prev}")
            prev = b.out_channels
        if self.blocks and self.feature_dim != self.blocks[-1].out_channels:
            raise ConfigError("feature_dim must equal the last block's output channels")
        if self.num_classes < 1 or self.input_size < self.q:
            raise ConfigError("need num_classes >= 1 and input_size >= q")

    def layer_geometry(self) -> list[tuple[int, int, int]]:
        """(kernel, stride, pad) of every layer that moves the window:
        the stem and each block's middle conv."""
        k, s, p, _ = self.stem
        layers = [(k, s, p)]
        layers.extend((b.kernel, b.stride, 0) for b in self.blocks)
        return layers


def receptive_field(config: BagNetConfig) -> tuple[int, int]:
    """(rf, stride) of the topmost feature layer via the composition
    recurrence rf += (k-1)*jump; jump *= stride."""
    rf, jump = 1, 1
    for k, s, _ in config.layer_geometry():
        rf += (k - 1) * jump
        jump *= s
    return rf, jump


def rf_geometry(config: BagNetConfig) -> tuple[int, int, int]:
    """(rf, jump, offset): location (i, j) of the top feature map reads the
    pixel window with top-left corner (offset + i*jump, offset + j*jump).
    Offset is negative when the stem pads."""
    rf, jump, offset = 1, 1, 0
    for k, s, p in config.layer_geometry():
        offset -= p * jump
        rf += (k - 1) * jump
        jump *= s
    return rf, jump, offset


# ---------------------------------------------------------------------------
# shipped configurations

def _blocks(stem_channels: int, mids: tuple[int, ...], kernels: tuple[int, ...],
            strides: tuple[int, ...], repeats: tuple[int, ...]) -> tuple[BlockSpec, ...]:
    blocks = []
    prev = stem_channels
    for mid, k, s, reps in zip(mids, kernels, strides, repeats):
        out = 4 * mid
        blocks.append(BlockSpec(prev, mid, out, k, s))
        prev = out
        for _ in range(reps - 1):
            blocks.append(BlockSpec(prev, mid, out, 1, 1))
    return tuple(blocks)


def bagnet5_32(num_classes: int = 4) -> BagNetConfig:
    """q=5 on 32 px inputs; heatmap stride 4."""
    return BagNetConfig(
        q=5, stem=(3, 1, 1, 16),
        blocks=_blocks(16, (8, 16, 32), (3, 1, 1), (2, 2, 1), (1, 1, 1)),
        num_classes=num_classes, input_size=32, feature_dim=128, name="bagnet5_32")


def bagnet9_32(num_classes: int = 4) -> BagNetConfig:
    """q=9 on 32 px inputs; heatmap stride 4. Stage 1 has a second
    (identity) block."""
    return BagNetConfig(
        q=9, stem=(3, 1, 1, 16),
        blocks=_blocks(16, (8, 16, 32), (3, 3, 1), (2, 2, 1), (2, 1, 1)),
        num_classes=num_classes, input_size=32, feature_dim=128, name="bagnet9_32")


def bagnet17_64(num_classes: int = 4) -> BagNetConfig:
    """q=17 on 64 px inputs; heatmap stride 8."""
    return BagNetConfig(
        q=17, stem=(3, 1, 1, 16),
        blocks=_blocks(16, (8, 16, 32), (3, 3, 3), (2, 2, 2), (1, 1, 1)),
        num_classes=num_classes, input_size=64, feature_dim=128, name="bagnet17_64")


def bagnet3_33(num_classes: int = 4) -> BagNetConfig:
    """q=3 on 33 px inputs with stride 3 and no padding: evidence locations
    tile the image exactly (the config used for block-scrambling runs)."""
    return BagNetConfig(
        q=3, stem=(3, 3, 0, 16),
        blocks=_blocks(16, (8, 16, 32), (1, 1, 1), (1, 1, 1), (1, 1, 1)),
        num_classes=num_classes, input_size=33, feature_dim=128, name="bagnet3_33")


def paper_scale(q: int, num_classes: int = 1000) -> BagNetConfig:
    """Full-scale variants for q in {9, 17, 33}: four stages of 3/4/6/3
    bottlenecks, feature_dim 2048, 224 px inputs. The stem merges the
    reference 1x1 + 3x3 pair into one 3x3 conv (same receptive field)."""
    kernels = {9: (3, 3, 1, 1), 17: (3, 3, 3, 1), 33: (3, 3, 3, 3)}
    if q not in kernels:
        raise ConfigError(f"paper-scale q must be one of {sorted(kernels)}")
    return BagNetConfig(
        q=q, stem=(3, 1, 0, 64),
        blocks=_blocks(64, (64, 128, 256, 512), kernels[q], (2, 2, 2, 1), (3, 4, 6, 3)),
        num_classes=num_classes, input_size=224, feature_dim=2048,
        name=f"bagnet{q}_paper")


SHIPPED_CONFIGS = {
    "bagnet5_32": bagnet5_32,
    "bagnet9_32": bagnet9_32,
    "bagnet17_64": bagnet17_64,
    "bagnet3_33": bagnet3_33,
}


# ---------------------------------------------------------------------------
# model state

class ModelState:
    """Parameters + batch-norm states for one config, plus the input
    normalization constants the model was trained with."""

    def __init__(self, config: BagNetConfig):
        self.config = config
        self.params: dict[str, Parameter] = {}
        self.bn: dict[str, BatchNormState] = {}
        self.mode = "eval"
        self.norm_mean = np.zeros(3, dtype=np.float32)
        self.norm_std = np.ones(3, dtype=np.float32)

    def train_mode(self):
        self.mode = "train"
        return self

    def eval_mode(self):
        self.mode = "eval"
        return self

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def _param(self, name: str, value: np.ndarray) -> Parameter:
        if name in self.params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        p = Parameter(name, Tensor(value, requires_grad=True))
        self.params[name] = p
        return p

    def _bn(self, name: str, channels: int) -> None:
        self._param(f"{name}.gamma", np.ones(channels, dtype=np.float32))
        self._param(f"{name}.beta", np.zeros(channels, dtype=np.float32))
        self.bn[name] = BatchNormState(channels)

    def normalize_images(self, images_u8: np.ndarray) -> np.ndarray:
        """u8 [.,3,H,W] -> float32 in model input space."""
        x = images_u8.astype(np.float32) / 255.0
        return (x - self.norm_mean[:, None, None]) / self.norm_std[:, None, None]


def build_model(config: BagNetConfig, seed: int) -> ModelState:
    """Instantiate parameters for `config` deterministically from `seed`.

    Fails fast if the config's computed receptive field differs from its
    declared q.
    """
    rf, _ = receptive_field(config)
    if rf != config.q:
        raise ConfigError(f"declared q={config.q} but computed receptive field is {rf}")
    model = ModelState(config)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xB46)))
    k, _, _, c = config.stem
    model._param("stem.conv.weight", fanin_normal(rng, (c, 3, k, k), 3 * k * k))
    model._bn("stem.bn", c)
    for i, b in enumerate(config.blocks):
        pre = f"block{i}"
        model._param(f"{pre}.conv1.weight",
                     fanin_normal(rng, (b.mid_channels, b.in_channels, 1, 1), b.in_channels))
        model._bn(f"{pre}.bn1", b.mid_channels)
        kk = b.kernel
        model._param(f"{pre}.conv2.weight",
                     fanin_normal(rng, (b.mid_channels, b.mid_channels, kk, kk),
                                  b.mid_channels * kk * kk))
        model._bn(f"{pre}.bn2", b.mid_channels)
        model._param(f"{pre}.conv3.weight",
                     fanin_normal(rng, (b.out_channels, b.mid_channels, 1, 1), b.mid_channels))
        model._bn(f"{pre}.bn3", b.out_channels)
        if b.needs_shortcut_conv:
            model._param(f"{pre}.shortcut.weight",
                         fanin_normal(rng, (b.out_channels, b.in_channels, 1, 1), b.in_channels))
            model._bn(f"{pre}.bn_sc", b.out_channels)
    model._param("classifier.weight",
                 fanin_normal(rng, (config.num_classes, config.feature_dim), config.feature_dim))
    model._param("classifier.bias", np.zeros(config.num_classes, dtype=np.float32))
    return model


# ---------------------------------------------------------------------------
# forward passes

def forward_features(model: ModelState, x: Tensor, stem_pad: Optional[int] = None) -> Tensor:
    """Feature extractor: [N,3,H,W] -> [N,feature_dim,Hm,Wm].

    `stem_pad` overrides the configured stem padding (the patch oracle
    passes 0 after padding crops itself).
    """
    training = model.mode == "train"
    p = model.params
    bn = model.bn
    k, s, pad, _ = model.config.stem
    if stem_pad is not None:
        pad = stem_pad
    h = conv2d(x, p["stem.conv.weight"].value, stride=s, zero_pad=pad)
    h = relu(batch_norm(h, p["stem.bn.gamma"].value, p["stem.bn.beta"].value,
                        bn["stem.bn"], training))
    for i, b in enumerate(model.config.blocks):
        pre = f"block{i}"
        main = conv2d(h, p[f"{pre}.conv1.weight"].value)
        main = relu(batch_norm(main, p[f"{pre}.bn1.gamma"].value, p[f"{pre}.bn1.beta"].value,
                               bn[f"{pre}.bn1"], training))
        main = conv2d(main, p[f"{pre}.conv2.weight"].value, stride=b.stride)
        main = relu(batch_norm(main, p[f"{pre}.bn2.gamma"].value, p[f"{pre}.bn2.beta"].value,
                               bn[f"{pre}.bn2"], training))
        main = conv2d(main, p[f"{pre}.conv3.weight"].value)
        main = batch_norm(main, p[f"{pre}.bn3.gamma"].value, p[f"{pre}.bn3.beta"].value,
                          bn[f"{pre}.bn3"], training)
        if b.needs_shortcut_conv:
            short = conv2d(h, p[f"{pre}.shortcut.weight"].value, stride=b.stride)
            short = batch_norm(short, p[f"{pre}.bn_sc.gamma"].value,
                               p[f"{pre}.bn_sc.beta"].value, bn[f"{pre}.bn_sc"], training)
        else:
            short = h
        # pad-0 3x3 middle convs shrink the main path; align the shortcut
        # to the top-left window anchor
        short = crop2d(short, main.shape[2], main.shape[3])
        h = relu(residual_add(main, short))
    return h


def classify_features(model: ModelState, feats: Tensor) -> Tensor:
    """Aggregate then classify: spatial mean of features, then the linear
    classifier. Returns [N, num_classes] logits (autodiff path)."""
    pooled = spatial_mean(feats)
    return linear(pooled, model.params["classifier.weight"].value,
                  model.params["classifier.bias"].value)


def forward_logits(model: ModelState, x: Tensor, stem_pad: Optional[int] = None) -> Tensor:
    return classify_features(model, forward_features(model, x, stem_pad=stem_pad))


def batch_image_logits(model: ModelState, images: np.ndarray) -> np.ndarray:
    """Image logits for a float batch [N,3,H,W] (eval-mode fast path)."""
    if model.mode != "eval":
        raise ConfigError("batch_image_logits requires eval mode")
    return forward_logits(model, Tensor(images)).data


@dataclass
class EvidenceMap:
    """Per-location, per-class logits plus the pixel geometry of each
    location's q x q window."""
    logits: np.ndarray        # [num_classes, Hm, Wm] float32
    stride: int
    rf_size: int
    offset: int               # top-left of location (0, 0), negative if padded
    input_hw: tuple[int, int]

    def rf_top_left(self, i: int, j: int) -> tuple[int, int]:
        return (self.offset + i * self.stride, self.offset + j * self.stride)

    def is_interior(self, i: int, j: int) -> bool:
        top, left = self.rf_top_left(i, j)
        h, w = self.input_hw
        return top >= 0 and left >= 0 and top + self.rf_size <= h and left + self.rf_size <= w

    def interior_mask(self) -> np.ndarray:
        _, hm, wm = self.logits.shape
        mask = np.zeros((hm, wm), dtype=bool)
        for i in range(hm):
            for j in range(wm):
                mask[i, j] = self.is_interior(i, j)
        return mask


def _single_image(image) -> np.ndarray:
    arr = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ConfigError(f"expected a [3,H,W] image, got {arr.shape}")
    return arr.astype(np.float32, copy=False)


def forward_evidence(model: ModelState, image) -> EvidenceMap:
    """Class evidence at every location of one [3,H,W] image (no softmax)."""
    if model.mode != "eval":
        raise ConfigError("forward_evidence requires eval mode")
    arr = _single_image(image)
    if min(arr.shape[1], arr.shape[2]) < model.config.q:
        raise ConfigError("image smaller than the patch size q")
    feats = forward_features(model, Tensor(arr[None])).data[0]  # [F, Hm, Wm]
    w64 = model.params["classifier.weight"].value.data.astype(np.float64)
    b64 = model.params["classifier.bias"].value.data.astype(np.float64)
    logits = np.einsum("fhw,kf->khw", feats.astype(np.float64), w64) + b64[:, None, None]
    rf, jump, offset = rf_geometry(model.config)
    return EvidenceMap(logits.astype(np.float32), jump, rf, offset,
                       (arr.shape[1], arr.shape[2]))


def image_logits(evidence: EvidenceMap) -> np.ndarray:
    """Per-class spatial mean of the evidence map."""
    return evidence.logits.astype(np.float64).mean(axis=(1, 2)).astype(np.float32)


def aggregate_then_classify(model: ModelState, image) -> np.ndarray:
    """Spatially average features first, then classify. Must match
    image_logits(forward_evidence(...)) - the two linear steps commute."""
    if model.mode != "eval":
        raise ConfigError("aggregate_then_classify requires eval mode")
    arr = _single_image(image)
    return forward_logits(model, Tensor(arr[None])).data[0]


def patch_oracle_evidence(model: ModelState, image) -> EvidenceMap:
    """Evidence computed the slow, literal way: crop every q x q window
    (zero-filled where stem padding reaches past the border), run the
    extractor with no padding on each crop independently, classify."""
    if model.mode != "eval":
        raise ConfigError("patch_oracle_evidence requires eval mode")
    arr = _single_image(image)
    q = model.config.q
    rf, jump, offset = rf_geometry(model.config)
    pad = -offset
    padded = np.pad(arr, ((0, 0), (pad, pad), (pad, pad))) if pad else arr
    h, w = arr.shape[1], arr.shape[2]
    hm = (h + 2 * pad - q) // jump + 1
    wm = (w + 2 * pad - q) // jump + 1
    crops = np.empty((hm * wm, 3, q, q), dtype=np.float32)
    for i in range(hm):
        for j in range(wm):
            top, left = i * jump, j * jump
            crops[i * wm + j] = padded[:, top:top + q, left:left + q]
    feats = forward_features(model, Tensor(crops), stem_pad=0).data
    if feats.shape[2] != 1 or feats.shape[3] != 1:
        raise ConfigError("patch crops did not reduce to a single location")
    w64 = model.params["classifier.weight"].value.data.astype(np.float64)
    b64 = model.params["classifier.bias"].value.data.astype(np.float64)
    logits = feats[:, :, 0, 0].astype(np.float64) @ w64.T + b64[None, :]
    logits = logits.T.reshape(model.config.num_classes, hm, wm)
    return EvidenceMap(logits.astype(np.float32), jump, rf, offset, (h, w))


def predict(model: ModelState, image) -> tuple[int, np.ndarray]:
    """(argmax class, softmax probabilities); ties go to the lowest index."""
    logits = image_logits(forward_evidence(model, image))
    probs = softmax(logits)
    return int(np.argmax(logits)), probs


# ---------------------------------------------------------------------------
# receptive-field certification

@dataclass
class RfCertificate:
    passed: bool
    max_leakage: float
    leak_offset: Optional[tuple[int, int]]  # pixel offset relative to the window top-left
    center_response: float
    trials: int

    def __str__(self) -> str:
        if self.passed:
            return (f"certified: leakage {self.max_leakage:.2e} over {self.trials} trials, "
                    f"center response {self.center_response:.2e}")
        return (f"FAILED: leakage {self.max_leakage:.2e} at pixel offset {self.leak_offset} "
                f"relative to the declared window")


def location_logits(model: ModelState, image: np.ndarray, loc: tuple[int, int]) -> np.ndarray:
    em = forward_evidence(model, image)
    return em.logits[:, loc[0], loc[1]].astype(np.float64)


def certify_receptive_field(model: ModelState, location: tuple[int, int],
                            trials: int = 8, seed: int = 0,
                            probes_per_trial: int = 24,
                            tol: float = 1e-6) -> RfCertificate:
    """Empirically check that the evidence at `location` ignores every pixel
    outside its declared q x q window and reacts to the window center.

    Perturbs random outside pixels of random images; any logit change above
    `tol` fails the certificate and names the offending pixel offset.
    """
    if model.mode != "eval":
        raise ConfigError("certification requires eval mode")
    cfg = model.config
    size = cfg.input_size
    _, jump, offset = rf_geometry(cfg)
    q = cfg.q
    i, j = location
    top, left = offset + i * jump, offset + j * jump
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xCE27)))

    inside = np.zeros((size, size), dtype=bool)
    r0, r1 = max(top, 0), min(top + q, size)
    c0, c1 = max(left, 0), min(left + q, size)
    inside[r0:r1, c0:c1] = True
    outside = np.argwhere(~inside)
    if len(outside) == 0:
        raise ConfigError("no pixels outside the declared window to probe")
    ring = [(r, c) for r in range(top - 1, top + q + 1) for c in range(left - 1, left + q + 1)
            if 0 <= r < size and 0 <= c < size and not inside[r, c]]

    max_leak = 0.0
    leak_at: Optional[tuple[int, int]] = None
    center_response = 0.0
    for trial in range(trials):
        img = rng.standard_normal((3, size, size)).astype(np.float32)
        base = location_logits(model, img, location)
        picks = [tuple(p) for p in outside[rng.integers(0, len(outside), size=probes_per_trial)]]
        if trial == 0:
            # always sweep the one-pixel ring just outside the declared
            # window: the tightest place for leakage to show up
            picks = ring + picks
        for (pr, pc) in picks:
            probe = img.copy()
            probe[:, pr, pc] += rng.standard_normal(3).astype(np.float32) * 3.0
            delta = float(np.max(np.abs(location_logits(model, probe, location) - base)))
            if delta > max_leak:
                max_leak = delta
                leak_at = (int(pr - top), int(pc - left))
        cr, cc = top + q // 2, left + q // 2
        if 0 <= cr < size and 0 <= cc < size:
            probe = img.copy()
            probe[:, cr, cc] += 3.0
            center_response = max(center_response, float(
                np.max(np.abs(location_logits(model, probe, location) - base))))
    passed = max_leak <= tol and center_response > 0.0
    return RfCertificate(passed, max_leak, None if max_leak <= tol else leak_at,
                         center_response, trials)


def with_declared_q(model: ModelState, q: int) -> ModelState:
    """Same weights under a config that *claims* patch size q (bypasses the
    build-time check; used for negative certification tests)."""
    fake = ModelState(replace(model.config, q=q, name=model.config.name + f"_claims{q}"))
    fake.params = model.params
    fake.bn = model.bn
    fake.mode = model.mode
    fake.norm_mean = model.norm_mean
    fake.norm_std = model.norm_std
    return fake
