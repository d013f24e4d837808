"""Small U-Net style encoder-decoder mapping (image, polygon raster) to
(displacement map, segmentation logits)."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .deform import make_rng
from .geometry import ConfigError, DisplacementField, DomainError
from .raster import ImagePatch, RasterTriple

DISP_BOUND_PX = 4.0
CHECKPOINT_MAGIC = b"PANN"
CHECKPOINT_VERSION = 1


class StateError(RuntimeError):
    pass


@dataclass(frozen=True)
class ArchDescriptor:
    widths: tuple[int, ...] = (16, 32, 64)
    kernel: int = 3
    fusion: str = "concat"  # or "dual": separate first convs for image and raster

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if not self.widths or min(self.widths) < 1:
            raise ConfigError(f"widths must be a non-empty list of positive ints, got {self.widths}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"kernel must be odd and positive, got {self.kernel}")
        if self.fusion not in ("concat", "dual"):
            raise ConfigError(f"unknown fusion {self.fusion!r}")
        if self.fusion == "dual" and self.widths[0] % 2:
            raise ConfigError("dual fusion needs an even first width")

    @property
    def depth(self) -> int:
        return len(self.widths)

    def layer_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        """Ordered (name, shape) for every parameter tensor."""
        k, ws = self.kernel, self.widths
        shapes = []

        def conv(name, cin, cout):
            shapes.append((name + ".w", (cout, cin, k, k)))
            shapes.append((name + ".b", (cout,)))

        if self.fusion == "concat":
            conv("enc0.a", 6, ws[0])
        else:
            conv("enc0.img", 3, ws[0] // 2)
            conv("enc0.ras", 3, ws[0] // 2)
        conv("enc0.b", ws[0], ws[0])
        for lvl in range(1, self.depth):
            conv(f"enc{lvl}.a", ws[lvl - 1], ws[lvl])
            conv(f"enc{lvl}.b", ws[lvl], ws[lvl])
        for lvl in range(self.depth - 2, -1, -1):
            conv(f"dec{lvl}.a", ws[lvl + 1] + ws[lvl], ws[lvl])
            conv(f"dec{lvl}.b", ws[lvl], ws[lvl])
        conv("head.disp", ws[0], 2)
        conv("head.seg", ws[0], 3)
        return shapes


@dataclass
class ModelParams:
    descriptor: ArchDescriptor
    params: dict[str, np.ndarray]
    scale: int = 1  # downscaling factor: 8, 4, 2 or 1

    def __post_init__(self):
        expected = dict(self.descriptor.layer_shapes())
        if list(expected) != list(self.params):
            raise ConfigError("parameter names do not match the architecture descriptor")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ConfigError(f"{name}: shape {self.params[name].shape} != {shape}")

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def copy(self) -> "ModelParams":
        return ModelParams(self.descriptor, {k: v.copy() for k, v in self.params.items()}, self.scale)

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.descriptor, {k: v.astype(dtype) for k, v in self.params.items()}, self.scale)


def init_model(descriptor: ArchDescriptor, seed: int, scale: int = 1, dtype=np.float64) -> ModelParams:
    """He-uniform weights (variance 2 / fan_in), zero biases."""
    rng = make_rng(seed)
    params = {}
    for name, shape in descriptor.layer_shapes():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = shape[1] * shape[2] * shape[3]
            limit = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-limit, limit, size=shape).astype(dtype)
    return ModelParams(descriptor, params, scale)


@dataclass
class ForwardOutput:
    disp: np.ndarray  # (N, 2, H, W) in pixels at the input resolution
    seg_logits: np.ndarray  # (N, 3, H, W)
    cache: dict | None = field(default=None, repr=False)

    def field(self, index: int = 0) -> DisplacementField:
        return DisplacementField(np.moveaxis(self.disp[index], 0, -1))


def _graph(m: ModelParams, image: np.ndarray, raster: np.ndarray):
    d = m.descriptor
    P = {name: ad.parameter(v, name) for name, v in m.params.items()}

    def conv(name, x):
        return ad.silu(ad.conv2d(x, P[name + ".w"], P[name + ".b"]))

    img = ad.constant(np.ascontiguousarray(image.transpose(0, 2, 3, 1)))
    ras = ad.constant(np.ascontiguousarray(raster.transpose(0, 2, 3, 1)))
    if d.fusion == "concat":
        x = conv("enc0.a", ad.concat([img, ras]))
    else:
        x = ad.concat([conv("enc0.img", img), conv("enc0.ras", ras)])
    x = conv("enc0.b", x)
    skips = [x]
    for lvl in range(1, d.depth):
        x = conv(f"enc{lvl}.b", conv(f"enc{lvl}.a", ad.maxpool2(x)))
        skips.append(x)
    for lvl in range(d.depth - 2, -1, -1):
        x = ad.concat([ad.upsample2(x), skips[lvl]])
        x = conv(f"dec{lvl}.b", conv(f"dec{lvl}.a", x))
    disp = ad.scaled_tanh(ad.conv2d(x, P["head.disp.w"], P["head.disp.b"]), DISP_BOUND_PX)
    seg = ad.conv2d(x, P["head.seg.w"], P["head.seg.b"])
    return P, ad.transpose(disp, (0, 3, 1, 2)), ad.transpose(seg, (0, 3, 1, 2))


def _as_batch(image, raster, dtype) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(image, ImagePatch):
        image = image.pixels[None]
    if isinstance(raster, RasterTriple):
        raster = raster.as_float()[None]
    image = np.asarray(image, dtype=dtype)
    raster = np.asarray(raster, dtype=dtype)
    if image.ndim != 4 or raster.ndim != 4:
        raise DomainError("expected (N, 3, H, W) inputs")
    if image.shape[0] != raster.shape[0] or image.shape[2:] != raster.shape[2:]:
        raise DomainError(f"image {image.shape} and raster {raster.shape} do not match")
    return image, raster


def forward(m: ModelParams, image, raster, keep_cache: bool = False) -> ForwardOutput:
    """Run the network on one sample (``ImagePatch``/``RasterTriple``) or a batch of arrays."""
    image, raster = _as_batch(image, raster, m.dtype)
    h, w = image.shape[2:]
    mult = 2 ** m.descriptor.depth
    if h % mult or w % mult:
        raise DomainError(f"extent {(h, w)} must be divisible by {mult}")
    P, disp, seg = _graph(m, image, raster)
    cache = {"params": P, "disp": disp, "seg": seg} if keep_cache else None
    return ForwardOutput(disp.value, seg.value, cache)


def _collect(P: dict, dtype) -> dict[str, np.ndarray]:
    return {k: (t.grad if t.grad is not None else np.zeros(t.value.shape, dtype)) for k, t in P.items()}


def backward(m: ModelParams, out: ForwardOutput, grad_disp=None, grad_seg=None) -> dict[str, np.ndarray]:
    """Parameter gradients for upstream gradients on the two outputs."""
    if out.cache is None:
        raise StateError("forward() must be run with keep_cache=True before backward()")
    P, disp, seg = out.cache["params"], out.cache["disp"], out.cache["seg"]
    if grad_disp is None:
        grad_disp = np.zeros_like(disp.value)
    if grad_seg is None:
        grad_seg = np.zeros_like(seg.value)
    for t in P.values():
        t.grad = None
    total = ad.add(ad.weighted_sum(disp, grad_disp), ad.weighted_sum(seg, grad_seg))
    total.backward()
    grads = _collect(P, m.dtype)
    for t in P.values():
        t.grad = None
    return grads


def loss_and_grads(m: ModelParams, image, raster, loss_fn: Callable) -> tuple[float, dict, ForwardOutput]:
    """Evaluate ``loss_fn(disp_tensor, seg_tensor) -> scalar Tensor`` and its parameter gradients."""
    image, raster = _as_batch(image, raster, m.dtype)
    P, disp, seg = _graph(m, image, raster)
    loss = loss_fn(disp, seg)
    loss.backward()
    return float(loss.value), _collect(P, m.dtype), ForwardOutput(disp.value, seg.value)


def loss_value(m: ModelParams, image, raster, loss_fn: Callable) -> float:
    image, raster = _as_batch(image, raster, m.dtype)
    _, disp, seg = _graph(m, image, raster)
    return float(loss_fn(disp, seg).value)


def predict_field(m: ModelParams, image: ImagePatch, raster: RasterTriple) -> DisplacementField:
    return forward(m, image, raster).field(0)


def finite_diff_check(
    m: ModelParams,
    inputs: tuple,
    loss_fn: Callable,
    epsilon: float = 1e-4,
    n_coords: int = 200,
    seed: int = 0,
    grads: dict | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``grads`` overrides the analytic gradients (used for negative controls).
    The relative error denominator is ``max(|a|, |n|, 1e-8)``.
    """
    if not 1e-5 <= epsilon <= 1e-3:
        raise ConfigError(f"epsilon must lie in [1e-5, 1e-3], got {epsilon}")
    m = m.astype(np.float64)
    image, raster = inputs
    if grads is None:
        _, grads, _ = loss_and_grads(m, image, raster, loss_fn)
    names = list(m.params)
    sizes = np.array([m.params[k].size for k in names])
    total = int(sizes.sum())
    rng = make_rng(seed)
    flat_idx = rng.choice(total, size=min(n_coords, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for fi in np.sort(flat_idx):
        t = int(np.searchsorted(offsets, fi, side="right") - 1)
        name, local = names[t], int(fi - offsets[t])
        arr = m.params[name].reshape(-1)
        orig = arr[local]
        arr[local] = orig + epsilon
        lp = loss_value(m, image, raster, loss_fn)
        arr[local] = orig - epsilon
        lm = loss_value(m, image, raster, loss_fn)
        arr[local] = orig
        num = (lp - lm) / (2 * epsilon)
        ana = float(grads[name].reshape(-1)[local])
        worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), 1e-8))
    return worst


def save_checkpoint(m: ModelParams, path) -> None:
    header = json.dumps(
        {
            "format_version": CHECKPOINT_VERSION,
            "scale": m.scale,
            "descriptor": asdict(m.descriptor),
            "tensors": [[name, list(shape)] for name, shape in m.descriptor.layer_shapes()],
        },
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + struct.pack("<I", len(header)) + header)
        for name, _ in m.descriptor.layer_shapes():
            fh.write(np.ascontiguousarray(m.params[name], dtype="<f4").tobytes())


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise StateError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<I", blob[4:8])
    header = json.loads(blob[8:8 + hlen].decode("utf-8"))
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise StateError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
    desc = header["descriptor"]
    descriptor = ArchDescriptor(tuple(desc["widths"]), desc["kernel"], desc["fusion"])
    shapes = descriptor.layer_shapes()
    pos, params = 8 + hlen, {}
    if len(blob) != pos + 4 * sum(int(np.prod(s)) for _, s in shapes):
        raise StateError(f"{path}: payload size does not match the descriptor")
    for name, shape in shapes:
        n = int(np.prod(shape))
        params[name] = np.frombuffer(blob, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * n
    return ModelParams(descriptor, params, int(header["scale"]))
