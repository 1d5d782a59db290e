"""
The codec network.

Per object: a variational encoder turns the average texture and the coarse
position map into an 8×8×4 latent grid; two conv decoders expand it into
a dense position map and a view-conditioned map of expression codes.
Per pixel: a small sine-activated decoder turns
[expression code, encoded xyz, encoded uv] into colour, only at pixels the
dense mesh covers.

The texture-space baseline swaps the expression decoder for one that emits
a view-conditioned RGB texture; covered pixels just look it up.
"""

import json
import logging
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Tuple, Union

import numpy as np

from pica import diffcore as dc
from pica.config import LATENT_SIZE, ModelConfig, Variant
from pica.diffcore import Tensor
from pica.geometry import MeshTopology, RegularizationTarget, make_grid_topology, sample_position_map
from pica.raster import Camera, GBuffer, interpolate_depth, rasterize, screen_inputs, view_direction

logger = logging.getLogger(__name__)

N_FREQ = 10
TARGET_KEY = "state.v_mu"

FEATURE_TAIL = {
    Variant.FULL: 8,
    Variant.COARSE: 8,
    Variant.NO_UV: 0,
    Variant.UV_NOPE: 2,
    Variant.NERF_PE: 4 * N_FREQ,
    Variant.PE_2D: 4,
    Variant.PE_1D: 4,
}


def parse_variant(name: Union[str, Variant]) -> Variant:
    try:
        return Variant(name)
    except ValueError:
        valid = ", ".join(v.value for v in Variant)
        raise ValueError(f"unknown variant '{name}' (expected one of: {valid})") from None


def feature_length(config: ModelConfig, variant: Optional[Variant] = None) -> int:
    """width of the per-pixel feature p for a variant"""
    variant = parse_variant(variant or config.variant)
    if variant == Variant.BASELINE:
        raise ValueError("the texture-space baseline has no per-pixel feature")
    return config.latent_channels + config.xyz_channels[-1] + FEATURE_TAIL[variant]


def appearance_prefix(variant: Variant) -> str:
    """parameter prefix of the view-conditioned decoder"""
    return "texture" if variant == Variant.BASELINE else "expression"


def appearance_channels(config: ModelConfig) -> List[int]:
    return config.texture_channels if config.variant == Variant.BASELINE else list(config.expression_channels)


def _uses_uv_map(variant: Variant) -> bool:
    return variant in (Variant.FULL, Variant.COARSE, Variant.PE_2D)


def _uses_1d_maps(variant: Variant) -> bool:
    return variant in (Variant.FULL, Variant.COARSE, Variant.PE_1D)


def parameter_shapes(config: ModelConfig) -> "OrderedDict[str, Tuple[int, ...]]":
    """canonical parameter names and shapes, without allocating anything"""
    shapes: "OrderedDict[str, Tuple[int, ...]]" = OrderedDict()
    R = config.posmap_resolution
    t0, t1 = config.tex_head_channels
    shapes["encoder.tex_head.0.weight"] = (t0, 3, 4, 4)
    shapes["encoder.tex_head.0.bias"] = (t0,)
    shapes["encoder.tex_head.1.weight"] = (t1, t0, 4, 4)
    shapes["encoder.tex_head.1.bias"] = (t1,)
    shapes["encoder.geom_head.weight"] = (config.geom_head_channels, 3, 1, 1)
    shapes["encoder.geom_head.bias"] = (config.geom_head_channels,)
    c = t1 + config.geom_head_channels
    for i, out in enumerate(config.encoder_channels):
        shapes[f"encoder.trunk.{i}.weight"] = (out, c, 4, 4)
        shapes[f"encoder.trunk.{i}.bias"] = (out,)
        c = out
    for head in ("mu", "logvar"):
        shapes[f"encoder.{head}.weight"] = (config.latent_channels, c, 1, 1)
        shapes[f"encoder.{head}.bias"] = (config.latent_channels,)

    for prefix, chain, c in (
        ("geometry", config.geometry_channels, config.latent_channels),
        (appearance_prefix(config.variant), appearance_channels(config), config.latent_channels + 3),
    ):
        for i, out in enumerate(chain):
            side = LATENT_SIZE * 2 ** (i + 1)
            shapes[f"{prefix}.block{i}.weight"] = (c, out, 4, 4)
            shapes[f"{prefix}.block{i}.bias"] = (out, side, side)
            c = out
    shapes["geometry.scale"] = (3,)
    shapes["geometry.offset"] = (3,)

    if _uses_uv_map(config.variant):
        shapes["encodings.map_uv"] = (config.uv_map_resolution, config.uv_map_resolution, 4)
    if _uses_1d_maps(config.variant):
        shapes["encodings.map_u"] = (config.uv_1d_resolution, 2)
        shapes["encodings.map_v"] = (config.uv_1d_resolution, 2)

    assert shapes[f"geometry.block{config.n_blocks - 1}.bias"][1] == R
    if config.variant == Variant.BASELINE:
        return shapes

    x0, x1 = config.xyz_channels
    shapes["xyz.0.weight"] = (x0, 3)
    shapes["xyz.0.bias"] = (x0,)
    shapes["xyz.1.weight"] = (x1, x0)
    shapes["xyz.1.bias"] = (x1,)

    c = feature_length(config)
    for i, out in enumerate(config.pixel_channels):
        shapes[f"pixel.{i}.weight"] = (out, c)
        shapes[f"pixel.{i}.bias"] = (out,)
        c = out
    return shapes


def parameter_count(config: ModelConfig, prefix: str = "") -> int:
    return int(sum(np.prod(s) for n, s in parameter_shapes(config).items() if n.startswith(prefix)))


def _conv_flops(out_c: int, in_c: int, k: int, out_side: int) -> int:
    return 2 * out_c * in_c * k * k * out_side * out_side


def per_object_flops(config: ModelConfig) -> int:
    """multiply-adds ×2 for one geometry + expression decode (encoder excluded)"""
    total = 0
    for chain, c in ((config.geometry_channels, config.latent_channels),
                     (appearance_channels(config), config.latent_channels + 3)):
        for i, out in enumerate(chain):
            # a stride-2 k4 transposed conv touches each output with (k/2)² taps per input channel
            total += _conv_flops(out, c, 2, LATENT_SIZE * 2 ** (i + 1))
            c = out
    return total


def per_pixel_flops(config: ModelConfig, variant: Optional[Variant] = None) -> int:
    """cost of decoding one covered pixel: lookups, xyz encoder and pixel decoder"""
    variant = parse_variant(variant or config.variant)
    if variant == Variant.BASELINE:
        return 2 * 4 * 3  # one bilinear RGB texel lookup
    flops = 2 * 4 * config.latent_channels * 2  # bilinear expression lookup
    x0, x1 = config.xyz_channels
    flops += 2 * (3 * x0 + x0 * x1) + (x0 + x1)
    if _uses_uv_map(variant):
        flops += 2 * 4 * 4 * 2
    if _uses_1d_maps(variant):
        flops += 2 * (2 * 2 * 2)
    if variant == Variant.NERF_PE:
        flops += 4 * N_FREQ
    c = feature_length(config, variant)
    for i, out in enumerate(config.pixel_channels):
        flops += 2 * c * out + (out if i < len(config.pixel_channels) - 1 else 0)
        c = out
    return int(flops)


def encode_uv_sinusoidal(uv: np.ndarray, n_freq: int = N_FREQ) -> np.ndarray:
    """[sin(2^k π u), cos(2^k π u), sin(2^k π v), cos(2^k π v)] for k = 0 … n_freq − 1"""
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    freq = (2.0 ** np.arange(n_freq)) * np.pi
    u = uv[:, :1] * freq
    v = uv[:, 1:] * freq
    return np.stack([np.sin(u), np.cos(u), np.sin(v), np.cos(v)], axis=2).reshape(len(uv), 4 * n_freq)


def view_tile(camera: Camera) -> np.ndarray:
    """3×8×8 grid holding the camera's unit view vector in every cell"""
    v = view_direction(camera)
    return np.broadcast_to(v[:, None, None], (3, LATENT_SIZE, LATENT_SIZE)).copy()


def reparameterize(mu: Tensor, logvar: Tensor, rng_seed: Union[int, np.random.Generator, None] = 0) -> Tensor:
    """mu + exp(logvar / 2) · eps with eps drawn from a seeded generator"""
    if mu.shape != logvar.shape:
        raise dc.ShapeError("reparameterize", "mu and logvar differ", mu=mu.shape, logvar=logvar.shape)
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    eps = rng.standard_normal(mu.shape)
    return mu + dc.exp(logvar * 0.5) * eps


@dataclass
class RenderResult:
    image: Tensor
    depth: Tensor
    gbuffer: GBuffer
    vertices: Tensor
    position_map: Tensor
    # expression codes, or RGB texels for the texture-space baseline
    expression_map: Tensor
    decoder_invocations: int = 0

    def image_array(self) -> np.ndarray:
        """H×W×3 float image clamped to [0, 1] for display"""
        return np.clip(np.transpose(self.image.data, (1, 2, 0)), 0.0, 1.0)


class PixelCodecAvatar:
    """Parameters plus the forward passes of the codec."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.variant = parse_variant(config.variant)
        self.dense_topology = make_grid_topology(config.dense_grid, config.dense_grid, config.uv_margin)
        self.coarse_topology = make_grid_topology(config.coarse_grid, config.coarse_grid, config.uv_margin)
        self.pixel_decoder_invocations = 0
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        rng = np.random.default_rng(seed)
        for name, shape in parameter_shapes(config).items():
            self.params[name] = Tensor(self._initial_value(name, shape, rng), requires_grad=True, name=name)
        logger.info(
            f"Model built: variant={self.variant.value}, {self.n_parameters} parameters, "
            f"pixel decoder {parameter_count(config, 'pixel.')}"
        )

    def _initial_value(self, name: str, shape: Tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
        cfg = self.config
        if name == "geometry.scale":
            return np.full(shape, cfg.scene_half_extent)
        if name == "geometry.offset":
            return np.asarray(cfg.scene_center, dtype=np.float64)
        if name.startswith("encodings."):
            return rng.uniform(-1.0, 1.0, shape)
        if name.startswith(("xyz.", "pixel.")):
            fan_in = shape[-1] if name.endswith("weight") else None
            if name.endswith("bias"):
                weight_in = self.params[name[:-4] + "weight"].shape[1]
                bound = 1.0 / np.sqrt(weight_in)
                return rng.uniform(-bound, bound, shape)
            if name.startswith(("xyz.0", "pixel.0")):
                bound = 1.0 / fan_in
            else:
                bound = np.sqrt(6.0 / fan_in) / cfg.omega
            return rng.uniform(-bound, bound, shape)
        if name.endswith("bias"):
            return np.zeros(shape)
        # conv / transposed-conv weights: kaiming-uniform for leaky-relu
        if name.startswith(("geometry.", "expression.", "texture.")):
            fan_in = shape[0] * (shape[2] // 2) ** 2
        else:
            fan_in = shape[1] * shape[2] * shape[3]
        bound = np.sqrt(6.0 / ((1.0 + cfg.leaky_slope ** 2) * fan_in))
        w = rng.uniform(-bound, bound, shape)
        if name == f"geometry.block{cfg.n_blocks - 1}.weight":
            w *= 0.01
        return w

    @property
    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def p(self, name: str) -> Tensor:
        return self.params[name]

    def topology(self, variant: Optional[Variant] = None) -> MeshTopology:
        variant = parse_variant(variant or self.variant)
        return self.coarse_topology if variant == Variant.COARSE else self.dense_topology

    # -- per-object stage -------------------------------------------------

    def encode(self, avg_texture: Union[Tensor, np.ndarray], coarse_position_map: Union[Tensor, np.ndarray]) -> Tuple[Tensor, Tensor]:
        """
        Args:
            avg_texture: 3×T×T RGB in [0, 1], T = 4 × position-map extent
            coarse_position_map: 3×R×R in mm
        Returns:
            (mu, logvar), each latent_channels×8×8
        """
        tex, geo = dc.as_tensor(avg_texture), dc.as_tensor(coarse_position_map)
        R = self.config.posmap_resolution
        if geo.shape != (3, R, R):
            raise dc.ShapeError("encode", "coarse position map has the wrong extent", expected=(3, R, R), got=geo.shape)
        if tex.shape != (3, 4 * R, 4 * R):
            raise dc.ShapeError("encode", "texture must be 4× the position map", expected=(3, 4 * R, 4 * R), got=tex.shape)
        slope = self.config.leaky_slope
        p = self.p
        # geometry channels normalised like the decoder output
        center = np.asarray(self.config.scene_center)[:, None, None]
        geo = (geo - center) * (1.0 / self.config.scene_half_extent)

        h = dc.leaky_relu(dc.conv2d(tex, p("encoder.tex_head.0.weight"), p("encoder.tex_head.0.bias"), 2, 1), slope)
        h = dc.leaky_relu(dc.conv2d(h, p("encoder.tex_head.1.weight"), p("encoder.tex_head.1.bias"), 2, 1), slope)
        g = dc.leaky_relu(dc.conv2d(geo, p("encoder.geom_head.weight"), p("encoder.geom_head.bias")), slope)
        h = dc.concat([h, g], axis=0)
        for i in range(self.config.n_blocks):
            h = dc.leaky_relu(dc.conv2d(h, p(f"encoder.trunk.{i}.weight"), p(f"encoder.trunk.{i}.bias"), 2, 1), slope)
        mu = dc.conv2d(h, p("encoder.mu.weight"), p("encoder.mu.bias"))
        logvar = dc.conv2d(h, p("encoder.logvar.weight"), p("encoder.logvar.bias"))
        return mu, logvar

    def _decode(self, prefix: str, x: Tensor) -> Tensor:
        n = self.config.n_blocks
        for i in range(n):
            x = dc.conv_transpose2d(x, self.p(f"{prefix}.block{i}.weight"), self.p(f"{prefix}.block{i}.bias"), 2, 1)
            if i < n - 1:
                x = dc.leaky_relu(x, self.config.leaky_slope)
        return x

    def decode_geometry(self, Z: Tensor) -> Tensor:
        """position map R×R×3 in mm"""
        self._check_latent(Z)
        raw = self._decode("geometry", Z)
        scale = dc.reshape(self.p("geometry.scale"), (3, 1, 1))
        offset = dc.reshape(self.p("geometry.offset"), (3, 1, 1))
        return dc.transpose(raw * scale + offset, (1, 2, 0))

    def _view_input(self, op: str, Z: Tensor, V: np.ndarray) -> Tensor:
        self._check_latent(Z)
        V = np.asarray(V, dtype=np.float64)
        if V.shape != (3, LATENT_SIZE, LATENT_SIZE):
            raise dc.ShapeError(op, "view tile must be 3×8×8", got=V.shape)
        if not np.allclose(np.linalg.norm(V, axis=0), 1.0, atol=1e-6):
            raise ValueError(f"{op}: view vectors must be unit length")
        return dc.concat([Z, V], axis=0)

    def decode_expression(self, Z: Tensor, V: np.ndarray) -> Tensor:
        """expression-code map R×R×latent_channels for a 3×8×8 view tile"""
        if self.variant == Variant.BASELINE:
            raise ValueError("the texture-space baseline decodes a texture, not expression codes")
        x = self._view_input("decode_expression", Z, V)
        return dc.transpose(self._decode("expression", x), (1, 2, 0))

    def decode_texture(self, Z: Tensor, V: np.ndarray) -> Tensor:
        """view-conditioned RGB texture R×R×3 of the texture-space baseline"""
        if self.variant != Variant.BASELINE:
            raise ValueError(f"variant '{self.variant.value}' has no texture decoder")
        x = self._view_input("decode_texture", Z, V)
        # texels start mid-grey
        return dc.transpose(self._decode("texture", x), (1, 2, 0)) + 0.5

    def decode_appearance(self, Z: Tensor, V: np.ndarray) -> Tensor:
        """the map sampled at each covered pixel's uv: expression codes or baseline texels"""
        if self.variant == Variant.BASELINE:
            return self.decode_texture(Z, V)
        return self.decode_expression(Z, V)

    def _check_latent(self, Z: Tensor):
        expected = (self.config.latent_channels, LATENT_SIZE, LATENT_SIZE)
        if Z.shape != expected:
            raise dc.ShapeError("decode", "latent grid has the wrong shape", expected=expected, got=Z.shape)

    def initialize_geometry(self, neutral_position_map: np.ndarray) -> None:
        """set the last geometry bias so an untrained decoder outputs the neutral face"""
        R = self.config.posmap_resolution
        neutral = np.asarray(neutral_position_map, dtype=np.float64)
        if neutral.shape != (R, R, 3):
            raise ValueError(f"neutral position map must be {R}×{R}×3, got {neutral.shape}")
        scale = self.p("geometry.scale").data.astype(np.float64)
        offset = self.p("geometry.offset").data.astype(np.float64)
        bias = self.p(f"geometry.block{self.config.n_blocks - 1}.bias")
        bias.data = Tensor(np.transpose((neutral - offset) / scale, (2, 0, 1))).data

    # -- per-pixel stage --------------------------------------------------

    def encode_uv(self, uv: np.ndarray) -> Tensor:
        """learned encoding: [m_uv(u, v) : 4, m_u(u) : 2, m_v(v) : 2]"""
        return dc.concat([self._encode_uv_2d(uv), *self._encode_uv_1d(uv)], axis=1)

    def _encode_uv_2d(self, uv: np.ndarray) -> Tensor:
        return dc.bilinear_sample(self.p("encodings.map_uv"), uv)

    def _encode_uv_1d(self, uv: np.ndarray) -> Tuple[Tensor, Tensor]:
        uv = np.asarray(uv, dtype=np.float64)
        half = np.full(len(uv), 0.5)
        out = []
        for name, coord in (("encodings.map_u", uv[:, 0]), ("encodings.map_v", uv[:, 1])):
            table = self.p(name)
            column = dc.reshape(table, (table.shape[0], 1, table.shape[1]))
            out.append(dc.bilinear_sample(column, np.stack([half, coord], axis=1)))
        return out[0], out[1]

    def encode_xyz(self, xyz: np.ndarray) -> Tensor:
        """two sine layers over face-centric mm coordinates pre-scaled to about [−1, 1]"""
        cfg = self.config
        scaled = (np.asarray(xyz, dtype=np.float64) - np.asarray(cfg.scene_center)) / cfg.scene_half_extent
        h = dc.sine_linear(Tensor(scaled), self.p("xyz.0.weight"), self.p("xyz.0.bias"), cfg.omega)
        return dc.sine_linear(h, self.p("xyz.1.weight"), self.p("xyz.1.bias"), cfg.omega)

    def variant_feature(self, variant: Union[str, Variant], z: Tensor, xyz: np.ndarray, uv: np.ndarray) -> Tensor:
        variant = self._check_variant(variant)
        if variant == Variant.BASELINE:
            raise ValueError("the texture-space baseline has no per-pixel feature")
        parts = [z, self.encode_xyz(xyz)]
        if variant in (Variant.FULL, Variant.COARSE):
            parts.append(self.encode_uv(uv))
        elif variant == Variant.UV_NOPE:
            parts.append(np.asarray(uv))
        elif variant == Variant.NERF_PE:
            parts.append(encode_uv_sinusoidal(uv))
        elif variant == Variant.PE_2D:
            parts.append(self._encode_uv_2d(uv))
        elif variant == Variant.PE_1D:
            parts.extend(self._encode_uv_1d(uv))
        return dc.concat(parts, axis=1)

    def pixel_color(self, p: Tensor) -> Tensor:
        """raw rgb per feature row; clamping happens only for display"""
        width = self.params["pixel.0.weight"].shape[1]
        if p.shape[-1] != width:
            raise dc.ShapeError("pixel_color", "feature length mismatch", expected=width, got=p.shape[-1])
        h = p
        last = len(self.config.pixel_channels) - 1
        for i in range(last):
            h = dc.sine_linear(h, self.p(f"pixel.{i}.weight"), self.p(f"pixel.{i}.bias"), self.config.omega)
        return dc.linear_final(h, self.p(f"pixel.{last}.weight"), self.p(f"pixel.{last}.bias"))

    def _check_variant(self, variant: Union[str, Variant]) -> Variant:
        variant = parse_variant(variant)
        if variant != self.variant and {variant, self.variant} != {Variant.FULL, Variant.COARSE}:
            raise ValueError(f"model was built for variant '{self.variant.value}', not '{variant.value}'")
        return variant

    def render_frame(self, Z: Tensor, camera: Camera, variant: Optional[Union[str, Variant]] = None) -> RenderResult:
        """decode geometry and appearance once, then colour only the covered pixels"""
        variant = self._check_variant(variant or self.variant)
        topo = self.topology(variant)
        G = self.decode_geometry(Z)
        vertices = sample_position_map(G, topo)
        gbuffer = rasterize(vertices, topo, camera)
        E = self.decode_appearance(Z, view_tile(camera))
        H, W = gbuffer.height, gbuffer.width

        background = np.where(gbuffer.coverage[..., None], 0.0, self.config.background)
        pixels = screen_inputs(gbuffer, E)
        n = len(pixels.pixel_index)
        if n:
            if variant == Variant.BASELINE:
                rgb = pixels.z
            else:
                rgb = self.pixel_color(self.variant_feature(variant, pixels.z, pixels.xyz, pixels.uv))
            image = dc.reshape(dc.scatter_rows(rgb, pixels.pixel_index, H * W), (H, W, 3)) + background
        else:
            image = Tensor(np.broadcast_to(background, (H, W, 3)))
        # one per-pixel evaluation (decoder call or baseline texel lookup) per covered pixel
        self.pixel_decoder_invocations += n
        assert n == gbuffer.n_covered
        depth = interpolate_depth(vertices, topo, camera, gbuffer)
        return RenderResult(dc.transpose(image, (2, 0, 1)), depth, gbuffer, vertices, G, E, n)

    # -- persistence ------------------------------------------------------

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data for name, p in self.params.items()}

    def load_state_dict(self, entries: Mapping[str, np.ndarray]) -> None:
        missing = [n for n in self.params if n not in entries]
        if missing:
            raise ValueError(f"checkpoint is missing parameters: {', '.join(missing[:5])}")
        for name, p in self.params.items():
            value = np.asarray(entries[name])
            if value.shape != p.shape:
                raise ValueError(f"parameter {name}: expected {p.shape}, got {value.shape}")
            p.data = Tensor(value).data


def save_model(path: Union[str, Path], model: PixelCodecAvatar, target: Optional[RegularizationTarget] = None) -> None:
    """checkpoint file plus a model.json sidecar holding the config"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries: Dict[str, np.ndarray] = dict(model.state_dict())
    if target is not None:
        entries[TARGET_KEY] = target.v_mu
    dc.save_checkpoint(path, entries)
    (path.parent / "model.json").write_text(model.config.model_dump_json(indent=2), encoding="utf-8")


def load_model(path: Union[str, Path], rate: float = 1e-4) -> Tuple[PixelCodecAvatar, Optional[RegularizationTarget]]:
    path = Path(path)
    sidecar = path.parent / "model.json"
    if not sidecar.exists():
        raise dc.CheckpointError(f"no model.json next to {path}")
    config = ModelConfig.model_validate(json.loads(sidecar.read_text(encoding="utf-8")))
    entries = dc.load_checkpoint(path)
    model = PixelCodecAvatar(config)
    model.load_state_dict(entries)
    target = None
    if TARGET_KEY in entries:
        target = RegularizationTarget(entries[TARGET_KEY].astype(np.float64), rate)
    logger.info(f"Loaded {path} (variant={config.variant.value})")
    return model, target
