"""Full F2Net forward pass on top of a small siamese convolutional encoder.

Parameters live in a flat ``{name: Tensor}`` dict; the functional building
blocks in :mod:`f2net.center`, :mod:`f2net.matching` and :mod:`f2net.fusion`
receive them explicitly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from . import ops
from .center import (
    CenterConfig,
    CenterTrack,
    combine_heatmap,
    gaussian,
    modulate_prior,
    select_center,
    semantic_heatmap,
    topk_nms,
    upsample_merge,
)
from .config import digest, dump_flat, from_flat, parse_flat, to_flat
from .fusion import FUSION_MODES, MaskLogits, decode, fuse
from .matching import GaussMap, MatchFlows, default_sigma_match, gauss_map, match_grid_center, run_matching
from .tensor import Tensor

MATCHING_MODES = ("center", "uniform", "none")
CENTER_STRATEGIES = ("motion", "maximum")


@dataclass
class ModelConfig:
    c2: int = 8
    c4: int = 16
    channels: int = 32          # C, depth of V_t
    center_channels: int = 64   # D, depth of U_t
    decoder_channels: int = 32
    matching: str = "center"
    fusion: str = "CSA"
    center_strategy: str = "motion"
    k: int = 5
    n: int = 10
    nms_window: int = 3
    sigma_gt: Optional[float] = None
    sigma_match: Optional[float] = None

    def __post_init__(self):
        if self.matching not in MATCHING_MODES:
            raise ValueError(f"matching must be one of {MATCHING_MODES}, got {self.matching!r}")
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"fusion must be one of {FUSION_MODES}, got {self.fusion!r}")
        if self.matching == "none" and self.fusion != "concat":
            raise ValueError("matching='none' leaves a single flow; use fusion='concat'")
        if self.center_strategy not in CENTER_STRATEGIES:
            raise ValueError(f"center_strategy must be one of {CENTER_STRATEGIES}")
        for name in ("c2", "c4", "channels", "center_channels", "decoder_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        CenterConfig(self.k, self.n, self.nms_window, self.sigma_gt)

    @property
    def center(self) -> CenterConfig:
        return CenterConfig(self.k, self.n, self.nms_window, self.sigma_gt)

    @property
    def n_flows(self) -> int:
        return 1 if self.matching == "none" else 3

    @property
    def reduction(self) -> int:
        return max(8, self.channels // 4)

    def to_text(self) -> str:
        return dump_flat(to_flat(self))

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        return from_flat(cls, parse_flat(text))


@dataclass
class FeaturePyramid:
    level2: Tensor
    level4: Tensor
    level8: Tensor


def param_shapes(cfg: ModelConfig) -> Dict[str, tuple]:
    c, d, dec = cfg.channels, cfg.center_channels, cfg.decoder_channels
    shapes = {
        "enc.conv1.w": (3, 3, 3, cfg.c2), "enc.conv1.b": (cfg.c2,),
        "enc.conv2.w": (3, 3, cfg.c2, cfg.c4), "enc.conv2.b": (cfg.c4,),
        "enc.conv3.w": (3, 3, cfg.c4, c), "enc.conv3.b": (c,),
        "center.proj8.w": (1, 1, c, d),
        "center.proj4.w": (1, 1, cfg.c4, d),
        "center.scale.w": (3, 3, d + 1, 1), "center.scale.b": (1,),
        "center.bias.w": (3, 3, d + 1, 1), "center.bias.b": (1,),
        "center.sem1.w": (3, 3, d, d), "center.sem1.b": (d,),
        "center.sem2.w": (1, 1, d, 1), "center.sem2.b": (1,),
    }
    if cfg.fusion == "concat":
        shapes["fusion.cat.w"] = (1, 1, cfg.n_flows * c, c)
        shapes["fusion.cat.b"] = (c,)
    if cfg.fusion in ("CA", "SCA", "CSA"):
        r = cfg.reduction
        shapes["fusion.ca.guide.w"] = (c, r)
        shapes["fusion.ca.guide.b"] = (r,)
        for i in range(3):
            shapes[f"fusion.ca.z{i}.w"] = (r, c)
            shapes[f"fusion.ca.z{i}.b"] = (c,)
    if cfg.fusion in ("SA", "SCA", "CSA"):
        shapes["fusion.sa.w"] = (1, 1, c, 3)
        shapes["fusion.sa.b"] = (3,)
    shapes.update({
        "dec.conv1.w": (3, 3, c, dec), "dec.conv1.b": (dec,),
        "dec.conv2.w": (1, 1, dec, 1), "dec.conv2.b": (1,),
    })
    return shapes


def _fan_in(name: str, shapes: Dict[str, tuple]) -> int:
    wshape = shapes[name[:-1] + "w"] if name.endswith(".b") else shapes[name]
    return int(np.prod(wshape[:-1]))


PRIOR_LOGIT = -2.0   # initial bias of both output logits, sigmoid(-2) ~ 0.12
PRIOR_BIASES = ("center.sem2.b", "dec.conv2.b")


def init_params(cfg: ModelConfig, seed: int = 0) -> Dict[str, Tensor]:
    """Seeded init, drawn in sorted-name order.

    Weights are uniform in ``+-sqrt(6/fan_in)`` and biases in
    ``+-1/sqrt(fan_in)``, except the two output-logit biases which start at
    ``PRIOR_LOGIT`` so early updates do not push every pixel to background.
    """
    rng = np.random.default_rng(seed)
    shapes = param_shapes(cfg)
    params = {}
    for name in sorted(shapes):
        fan_in = _fan_in(name, shapes)
        bound = np.sqrt((1.0 if name.endswith(".b") else 6.0) / fan_in)
        values = rng.uniform(-bound, bound, size=shapes[name])
        if name in PRIOR_BIASES:
            values[...] = PRIOR_LOGIT
        params[name] = Tensor(values, requires_grad=True, name=name)
    return params


def prepare_frame(frame) -> Tensor:
    """RGB frame in [0, 1] (H x W x 3) -> zero-centred input tensor."""
    arr = frame.data if isinstance(frame, Tensor) else np.asarray(frame)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an H x W x 3 frame, got {arr.shape}")
    if arr.shape[0] % 8 or arr.shape[1] % 8:
        raise ValueError(f"frame size {arr.shape[:2]} must be divisible by 8")
    return Tensor(arr - 0.5)


def toy_encoder(frame: Tensor, p: Dict[str, Tensor]) -> FeaturePyramid:
    """Three stride-2 3x3 conv + ReLU stages giving strides 2, 4 and 8."""
    if frame.shape[0] % 8 or frame.shape[1] % 8:
        raise ValueError(f"frame size {frame.shape[:2]} must be divisible by 8")
    l2 = ops.relu(ops.conv2d(frame, p["enc.conv1.w"], p["enc.conv1.b"], stride=2, pad=1))
    l4 = ops.relu(ops.conv2d(l2, p["enc.conv2.w"], p["enc.conv2.b"], stride=2, pad=1))
    l8 = ops.relu(ops.conv2d(l4, p["enc.conv3.w"], p["enc.conv3.b"], stride=2, pad=1))
    return FeaturePyramid(level2=l2, level4=l4, level8=l8)


def predict_heatmap(pyr: FeaturePyramid, g_prev: Tensor, p: Dict[str, Tensor]) -> Tensor:
    u = upsample_merge(pyr, p["center.proj8.w"], p["center.proj4.w"])
    g_hat = modulate_prior(u, g_prev, p["center.scale.w"], p["center.scale.b"],
                           p["center.bias.w"], p["center.bias.b"])
    f = semantic_heatmap(u, p["center.sem1.w"], p["center.sem1.b"], p["center.sem2.w"], p["center.sem2.b"])
    return combine_heatmap(g_hat, f)


def _fusion_params(p: Dict[str, Tensor]) -> Dict[str, Tensor]:
    return {k[len("fusion."):]: v for k, v in p.items() if k.startswith("fusion.")}


def segmentation_head(v0: Tensor, vt: Tensor, prior: Optional[GaussMap], cfg: ModelConfig,
                      p: Dict[str, Tensor]) -> Tuple[MaskLogits, Optional[MatchFlows]]:
    """Matching, fusion and decoding from stride-8 features to the full-size mask."""
    if cfg.matching == "none":
        flows = None
        fused = fuse([vt], "concat", _fusion_params(p))
    else:
        flows = run_matching(v0, vt, prior if cfg.matching == "center" else None)
        fused = fuse(flows.as_list(), cfg.fusion, _fusion_params(p))
    mask = decode(fused, p["dec.conv1.w"], p["dec.conv1.b"], p["dec.conv2.w"], p["dec.conv2.b"])
    return mask, flows


@dataclass
class ForwardResult:
    heatmap: Tensor              # H_t, quarter resolution
    center: Tuple[int, int]      # o_t, quarter-resolution cell used for matching
    gauss: Optional[GaussMap]    # G_t at stride 8 (None for uniform / no matching)
    mask: MaskLogits             # R_t
    next_prior: Tensor           # stride-4 gauss map of o_t, fed as G_prev next frame
    flows: Optional[MatchFlows] = None
    pyramid_ref: Optional[FeaturePyramid] = None
    pyramid_cur: Optional[FeaturePyramid] = None


class F2Net:
    """Model parameters plus the per-frame forward pass.

    >>> net = F2Net(ModelConfig(channels=4, center_channels=4, decoder_channels=4, c2=4, c4=4))
    >>> frame = np.zeros((16, 16, 3))
    >>> net.forward(frame, frame).mask.prob.shape
    (16, 16, 1)
    """

    def __init__(self, config: Optional[ModelConfig] = None, params: Optional[Dict[str, Tensor]] = None,
                 seed: int = 0):
        self.config = config or ModelConfig()
        self.params = params if params is not None else init_params(self.config, seed)
        expected = param_shapes(self.config)
        if set(expected) != set(self.params):
            raise ValueError(f"parameter names do not match config: {sorted(set(expected) ^ set(self.params))}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ValueError(f"parameter {name} has shape {self.params[name].shape}, expected {shape}")

    def parameters(self, prefixes: Tuple[str, ...] = ()) -> List[Tensor]:
        names = sorted(self.params)
        if prefixes:
            names = [n for n in names if n.startswith(prefixes)]
        return [self.params[n] for n in names]

    def sigma_match(self, shape) -> float:
        return self.config.sigma_match if self.config.sigma_match is not None else default_sigma_match(shape)

    def forward(self, frame0, frame_t, g_prev: Optional[Tensor] = None, track: Optional[CenterTrack] = None,
                center: Optional[Tuple[int, int]] = None, ref_pyramid: Optional[FeaturePyramid] = None,
                probe: Optional[Callable] = None) -> ForwardResult:
        """Process the current frame against the reference frame.

        ``center`` (quarter-resolution cell) overrides the selected center for
        matching, e.g. the ground-truth center during early training. When
        ``track`` is given the selected center is appended to it.
        """
        cfg = self.config
        p = self.params
        pyr0 = ref_pyramid if ref_pyramid is not None else toy_encoder(prepare_frame(frame0), p)
        pyrt = toy_encoder(prepare_frame(frame_t), p)
        qh, qw = pyrt.level4.shape[:2]
        if g_prev is None:
            g_prev = Tensor(np.zeros((qh, qw, 1)))
        heat = predict_heatmap(pyrt, g_prev, p)

        if center is None:
            cands = topk_nms(heat, cfg.k, cfg.nms_window)
            if track is not None and len(track) > 0 and cfg.center_strategy == "motion":
                chosen = select_center(cands, track.predict(), "motion")
            else:
                chosen = select_center(cands, None, "maximum")
            source = "predicted"
        else:
            chosen = (int(center[0]), int(center[1]))
            source = "override"
        if probe is not None:
            probe(source, chosen)
        if track is not None:
            track.append(chosen)

        vt = pyrt.level8
        gmap = None
        if cfg.matching == "center":
            gmap = gauss_map(match_grid_center(chosen), vt.shape, self.sigma_match(vt.shape))
        mask, flows = segmentation_head(pyr0.level8, vt, gmap, cfg, p)
        next_prior = Tensor(gaussian(chosen, (qh, qw), cfg.center.sigma_for((qh, qw))))
        return ForwardResult(heatmap=heat, center=chosen, gauss=gmap, mask=mask, next_prior=next_prior,
                             flows=flows, pyramid_ref=pyr0, pyramid_cur=pyrt)

    def segment_sequence(self, frames) -> List[ForwardResult]:
        """Run the tracker over a whole sequence with frame 0 as reference."""
        track = CenterTrack(n=self.config.n)
        g_prev = None
        ref = toy_encoder(prepare_frame(frames[0]), self.params)
        results = []
        for frame in frames:
            res = self.forward(frames[0], frame, g_prev=g_prev, track=track, ref_pyramid=ref)
            g_prev = res.next_prior
            results.append(res)
        return results

    def state_copy(self) -> Dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}


# -- checkpoints -----------------------------------------------------------

MAGIC = b"F2NT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed or inconsistent checkpoint file."""


def write_container(path, text: str, arrays: Dict[str, np.ndarray]) -> None:
    """Write named float64 arrays plus a text header, atomically.

    Layout (little-endian): ``F2NT``, u16 version, 32-byte sha256 of the
    text, u32 text length + text, u32 record count, then per array: u16 name
    length, name, u8 rank, u32 dims, float64 values. Records are sorted by name.
    """
    raw_text = text.encode("utf-8")
    chunks = [MAGIC, struct.pack("<H", FORMAT_VERSION), digest(text),
              struct.pack("<I", len(raw_text)), raw_text, struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        data = np.asarray(arrays[name])
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", data.ndim) + struct.pack(f"<{data.ndim}I", *data.shape))
        chunks.append(np.ascontiguousarray(data, dtype="<f8").tobytes())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def read_container(path) -> Tuple[str, Dict[str, np.ndarray]]:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated checkpoint")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise CheckpointError(f"{path}: not an F2NT checkpoint")
    (version,) = struct.unpack("<H", take(2))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    text_digest = take(32)
    (text_len,) = struct.unpack("<I", take(4))
    try:
        text = take(text_len).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CheckpointError(f"{path}: header text is not UTF-8") from exc
    if digest(text) != text_digest:
        raise CheckpointError(f"{path}: config digest mismatch")
    (count,) = struct.unpack("<I", take(4))
    arrays: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8", errors="replace")
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(shape)) if rank else 1
        values = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
        if name in arrays:
            raise CheckpointError(f"{path}: duplicate record {name}")
        arrays[name] = values
    if pos != len(buf):
        raise CheckpointError(f"{path}: trailing bytes after records")
    return text, arrays


def save_checkpoint(path, model: F2Net) -> None:
    """Model config text plus every parameter, in the container format."""
    write_container(path, model.config.to_text(), {k: v.data for k, v in model.params.items()})


def load_checkpoint(path) -> F2Net:
    text, arrays = read_container(path)
    try:
        config = ModelConfig.from_text(text)
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"{path}: bad config header: {exc}") from exc
    dtype = np.dtype(Tensor(0.0).data.dtype)
    params = {k: Tensor(v.astype(dtype), requires_grad=True, name=k) for k, v in arrays.items()}
    try:
        return F2Net(config, params)
    except ValueError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
