"""The separation network.

Three stages, all built on the autodiff engine:

* a residual convolutional encoder over the compressed mixture
  spectrogram, root stride 1 and one stride-2 transition per stage
  boundary, producing a coarse feature grid with Fourier positional
  features appended;
* a transformer that refines a bank of learned query vectors, per layer:
  multi-head self-attention among the queries, cross-attention of the
  queries over the flattened feature grid (the grid supplies both keys
  and values), and a feed-forward block, each pre-normalized with a
  residual connection. The refined queries are the per-source slots;
* a broadcast decoder that tiles every slot across the output grid,
  appends Fourier features of each cell's coordinates, and maps each
  cell through a shared MLP to one scalar. The decoder treats slots
  independently and identically, so it is permutation-equivariant by
  construction.

Decoder output is linear and may be negative; clamping happens at mask
computation, not here, so training gradients are unaffected.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .dsp import CompressedMagnitude
from .errors import ShapeError

ENCODER_BLOCK_PRESETS = {
    "small": (2, 2, 2, 2),
    "resnet34": (3, 4, 6, 3),
}


@dataclass(frozen=True)
class ModelConfig:
    n_slots: int = 2
    slot_dim: int = 128
    encoder_preset: str = "small"
    encoder_channels: tuple[int, ...] = (32, 64, 128, 256)
    encoder_blocks: tuple[int, ...] | None = None  # overrides the preset
    transformer_layers: int = 4
    attention_heads: int = 4
    fourier_bands: int = 4
    decoder_hidden: tuple[int, ...] = (256, 256, 256)
    freq_bins: int = 256
    time_frames: int = 64
    norm_groups: int = 8

    def __post_init__(self):
        if self.n_slots < 1:
            raise ValueError(f"need at least one slot, got {self.n_slots}")
        if self.slot_dim % self.attention_heads != 0:
            raise ValueError(
                f"slot_dim {self.slot_dim} not divisible by {self.attention_heads} heads"
            )
        if self.encoder_blocks is None and self.encoder_preset not in ENCODER_BLOCK_PRESETS:
            raise ValueError(f"unknown encoder preset {self.encoder_preset!r}")
        if self.encoder_blocks is not None and len(self.encoder_blocks) != len(self.encoder_channels):
            raise ValueError("encoder_blocks and encoder_channels must have equal length")
        stride = self.total_stride
        if self.freq_bins % stride or self.time_frames % stride:
            raise ValueError(
                f"grid {self.freq_bins}x{self.time_frames} not divisible by encoder stride {stride}"
            )

    @property
    def blocks_per_stage(self) -> tuple[int, ...]:
        if self.encoder_blocks is not None:
            return self.encoder_blocks
        return ENCODER_BLOCK_PRESETS[self.encoder_preset][: len(self.encoder_channels)]

    @property
    def total_stride(self) -> int:
        return 2 ** (len(self.encoder_channels) - 1)

    @property
    def grid_shape(self) -> tuple[int, int]:
        return (self.freq_bins // self.total_stride, self.time_frames // self.total_stride)

    @property
    def fourier_dim(self) -> int:
        return 4 * self.fourier_bands

    @property
    def feature_dim(self) -> int:
        return self.encoder_channels[-1] + self.fourier_dim

    @classmethod
    def full_scale(cls) -> "ModelConfig":
        """The documented full-scale preset: ResNet-34 encoder, 4096-dim slots."""
        return cls(
            slot_dim=4096,
            encoder_preset="resnet34",
            encoder_channels=(64, 128, 256, 512),
            attention_heads=8,
            decoder_hidden=(512, 512, 512),
        )


def fourier_features(pos: tuple[float, float], bands: int) -> np.ndarray:
    """Sinusoidal features of a 2-D position in the unit square.

    Layout: sin(2^b pi f) for b < bands, then the matching cosines, then
    the same pair for t. Length 4 * bands.
    """
    f, t = pos
    if not (0.0 <= f <= 1.0 and 0.0 <= t <= 1.0):
        raise ValueError(f"position {pos} outside the unit square")
    freqs = (2.0 ** np.arange(bands)) * np.pi
    return np.concatenate(
        [np.sin(freqs * f), np.cos(freqs * f), np.sin(freqs * t), np.cos(freqs * t)]
    )


def fourier_feature_grid(n_rows: int, n_cols: int, bands: int) -> np.ndarray:
    """[rows, cols, 4*bands] grid of fourier_features over normalized coords."""
    rows = np.arange(n_rows) / max(n_rows - 1, 1)
    cols = np.arange(n_cols) / max(n_cols - 1, 1)
    freqs = (2.0 ** np.arange(bands)) * np.pi
    fr = rows[:, None] * freqs[None, :]   # [rows, bands]
    ct = cols[:, None] * freqs[None, :]   # [cols, bands]
    row_part = np.concatenate([np.sin(fr), np.cos(fr)], axis=1)  # [rows, 2b]
    col_part = np.concatenate([np.sin(ct), np.cos(ct)], axis=1)  # [cols, 2b]
    grid = np.concatenate(
        [
            np.broadcast_to(row_part[:, None, :], (n_rows, n_cols, 2 * bands)),
            np.broadcast_to(col_part[None, :, :], (n_rows, n_cols, 2 * bands)),
        ],
        axis=2,
    )
    return np.ascontiguousarray(grid, dtype=np.float64)


class SeparationModel:
    """Encoder + slot transformer + broadcast decoder with a flat,
    name-addressed parameter dictionary (the checkpoint unit)."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params: dict[str, ad.Tensor] = {}
        self._rng = np.random.default_rng(seed)
        self._build()
        gf, gt = config.grid_shape
        self._encoder_pos = fourier_feature_grid(gf, gt, config.fourier_bands).astype(self.dtype)
        dec = fourier_feature_grid(config.freq_bins, config.time_frames, config.fourier_bands)
        self._decoder_pos = dec.reshape(-1, config.fourier_dim).astype(self.dtype)

    # ---- construction -------------------------------------------------

    def _param(self, name: str, values: np.ndarray) -> ad.Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter {name}")
        t = ad.Tensor(values.astype(self.dtype), requires_grad=True)
        self.params[name] = t
        return t

    def _conv_param(self, name, c_out, c_in, k):
        std = math.sqrt(2.0 / (c_in * k * k))
        self._param(name, self._rng.standard_normal((c_out, c_in, k, k)) * std)

    def _linear_param(self, name, d_in, d_out, bias=True):
        std = math.sqrt(1.0 / d_in)
        self._param(f"{name}.w", self._rng.standard_normal((d_in, d_out)) * std)
        if bias:
            self._param(f"{name}.b", np.zeros(d_out))

    def _norm_param(self, name, channels):
        self._param(f"{name}.scale", np.ones(channels))
        self._param(f"{name}.bias", np.zeros(channels))

    def _build(self):
        cfg = self.config
        channels = cfg.encoder_channels
        self._conv_param("enc.root.conv", channels[0], 1, 3)
        self._norm_param("enc.root.norm", channels[0])
        c_prev = channels[0]
        for s, (c, n_blocks) in enumerate(zip(channels, cfg.blocks_per_stage)):
            for b in range(n_blocks):
                prefix = f"enc.s{s}.b{b}"
                c_in = c_prev if b == 0 else c
                self._conv_param(f"{prefix}.conv1", c, c_in, 3)
                self._norm_param(f"{prefix}.norm1", c)
                self._conv_param(f"{prefix}.conv2", c, c, 3)
                self._norm_param(f"{prefix}.norm2", c)
                if b == 0 and (s > 0 or c_in != c):
                    self._conv_param(f"{prefix}.proj", c, c_in, 1)
                    self._norm_param(f"{prefix}.proj_norm", c)
            c_prev = c

        d = cfg.slot_dim
        self._param("queries", self._rng.standard_normal((cfg.n_slots, d)))
        c_feat = cfg.feature_dim
        for layer in range(cfg.transformer_layers):
            p = f"tf.l{layer}"
            self._norm_param(f"{p}.self.norm", d)
            for proj in ("wq", "wk", "wv"):
                self._linear_param(f"{p}.self.{proj}", d, d, bias=False)
            self._linear_param(f"{p}.self.wo", d, d)
            self._norm_param(f"{p}.cross.norm_q", d)
            self._norm_param(f"{p}.cross.norm_kv", c_feat)
            self._linear_param(f"{p}.cross.wq", d, d, bias=False)
            self._linear_param(f"{p}.cross.wk", c_feat, d, bias=False)
            self._linear_param(f"{p}.cross.wv", c_feat, d, bias=False)
            self._linear_param(f"{p}.cross.wo", d, d)
            self._norm_param(f"{p}.ffn.norm", d)
            self._linear_param(f"{p}.ffn.fc1", d, 4 * d)
            self._linear_param(f"{p}.ffn.fc2", 4 * d, d)
        self._norm_param("tf.final_norm", d)

        widths = list(cfg.decoder_hidden)
        self._linear_param("dec.slot", d, widths[0], bias=False)
        self._linear_param("dec.pos", cfg.fourier_dim, widths[0], bias=False)
        self._param("dec.b0", np.zeros(widths[0]))
        for i in range(1, len(widths)):
            self._linear_param(f"dec.h{i}", widths[i - 1], widths[i])
        self._linear_param("dec.out", widths[-1], 1)

    def parameter_count(self) -> int:
        return sum(t.size for t in self.params.values())

    # ---- forward pieces ----------------------------------------------

    def _groups(self, channels: int) -> int:
        return math.gcd(self.config.norm_groups, channels)

    def _group_norm(self, h, name, channels):
        return ad.group_norm(
            h, self._groups(channels), self.params[f"{name}.scale"], self.params[f"{name}.bias"]
        )

    def _layer_norm(self, h, name):
        return ad.layer_norm(h, self.params[f"{name}.scale"], self.params[f"{name}.bias"])

    def _linear(self, h, name):
        out = ad.matmul(h, self.params[f"{name}.w"])
        bias = self.params.get(f"{name}.b")
        return ad.add(out, bias) if bias is not None else out

    def _basic_block(self, h, prefix, channels, stride):
        y = ad.conv2d(h, self.params[f"{prefix}.conv1"], stride=stride, padding="same")
        y = ad.relu(self._group_norm(y, f"{prefix}.norm1", channels))
        y = ad.conv2d(y, self.params[f"{prefix}.conv2"], stride=1, padding="same")
        y = self._group_norm(y, f"{prefix}.norm2", channels)
        if f"{prefix}.proj" in self.params:
            shortcut = ad.conv2d(h, self.params[f"{prefix}.proj"], stride=stride, padding="same")
            shortcut = self._group_norm(shortcut, f"{prefix}.proj_norm", channels)
        else:
            shortcut = h
        return ad.relu(ad.add(y, shortcut))

    def encode_features(self, x: ad.Tensor) -> ad.Tensor:
        """Map [B, 1, F, T] input to [B, grid_cells, feature_dim]."""
        cfg = self.config
        if x.shape[2] != cfg.freq_bins or x.shape[3] != cfg.time_frames:
            raise ShapeError(
                f"expected {cfg.freq_bins}x{cfg.time_frames} input, got {x.shape[2]}x{x.shape[3]}"
            )
        h = ad.conv2d(x, self.params["enc.root.conv"], stride=1, padding="same")
        h = ad.relu(self._group_norm(h, "enc.root.norm", cfg.encoder_channels[0]))
        for s, (c, n_blocks) in enumerate(zip(cfg.encoder_channels, cfg.blocks_per_stage)):
            for b in range(n_blocks):
                stride = 2 if (s > 0 and b == 0) else 1
                h = self._basic_block(h, f"enc.s{s}.b{b}", c, stride)
        batch = h.shape[0]
        gf, gt = cfg.grid_shape
        pos = np.broadcast_to(
            self._encoder_pos.transpose(2, 0, 1)[None], (batch, cfg.fourier_dim, gf, gt)
        )
        z = ad.concat([h, ad.Tensor(np.ascontiguousarray(pos))], axis=1)
        z = ad.transpose(z, (0, 2, 3, 1))
        return ad.reshape(z, (batch, gf * gt, cfg.feature_dim))

    def _attention(self, queries: ad.Tensor, memory: ad.Tensor, prefix: str) -> ad.Tensor:
        cfg = self.config
        n_heads = cfg.attention_heads
        d = cfg.slot_dim
        dh = d // n_heads
        batch, n_q = queries.shape[0], queries.shape[1]
        n_k = memory.shape[1]
        q = ad.reshape(self._linear(queries, f"{prefix}.wq"), (batch, n_q, n_heads, dh))
        k = ad.reshape(self._linear(memory, f"{prefix}.wk"), (batch, n_k, n_heads, dh))
        v = ad.reshape(self._linear(memory, f"{prefix}.wv"), (batch, n_k, n_heads, dh))
        q = ad.transpose(q, (0, 2, 1, 3))
        k = ad.transpose(k, (0, 2, 3, 1))
        v = ad.transpose(v, (0, 2, 1, 3))
        scores = ad.mul(ad.matmul(q, k), ad.Tensor(np.asarray(1.0 / math.sqrt(dh), self.dtype)))
        weights = ad.softmax(scores, axis=-1)
        ctx = ad.matmul(weights, v)
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (batch, n_q, d))
        return self._linear(ctx, f"{prefix}.wo")

    def infer_slots(self, z: ad.Tensor) -> ad.Tensor:
        """Refine the learned query bank over the feature grid: [B, n, d]."""
        cfg = self.config
        batch = z.shape[0]
        queries = ad.reshape(self.params["queries"], (1, cfg.n_slots, cfg.slot_dim))
        slots = ad.add(queries, ad.Tensor(np.zeros((batch, 1, 1), dtype=self.dtype)))
        for layer in range(cfg.transformer_layers):
            p = f"tf.l{layer}"
            normed = self._layer_norm(slots, f"{p}.self.norm")
            slots = ad.add(slots, self._attention(normed, normed, f"{p}.self"))
            q_in = self._layer_norm(slots, f"{p}.cross.norm_q")
            kv = self._layer_norm(z, f"{p}.cross.norm_kv")
            slots = ad.add(slots, self._attention(q_in, kv, f"{p}.cross"))
            f_in = self._layer_norm(slots, f"{p}.ffn.norm")
            hidden = ad.relu(self._linear(f_in, f"{p}.ffn.fc1"))
            slots = ad.add(slots, self._linear(hidden, f"{p}.ffn.fc2"))
        return self._layer_norm(slots, "tf.final_norm")

    def decode_slots(self, slots: ad.Tensor) -> ad.Tensor:
        """Broadcast-decode [B, n, d] slots to [B, n, F, T] spectrograms.

        The first MLP layer is evaluated as slot-part + position-part and
        summed under broadcasting, which equals concatenating the tiled
        slot with the cell's Fourier features and applying one linear map.
        """
        cfg = self.config
        if slots.shape[-1] != cfg.slot_dim:
            raise ShapeError(f"slots have dim {slots.shape[-1]}, config wants {cfg.slot_dim}")
        batch, n = slots.shape[0], slots.shape[1]
        cells = cfg.freq_bins * cfg.time_frames
        h0 = cfg.decoder_hidden[0]
        slot_part = ad.reshape(self._linear(slots, "dec.slot"), (batch, n, 1, h0))
        pos_part = ad.reshape(
            self._linear(ad.Tensor(self._decoder_pos), "dec.pos"), (1, 1, cells, h0)
        )
        h = ad.relu(ad.add(ad.add(slot_part, pos_part), self.params["dec.b0"]))
        for i in range(1, len(cfg.decoder_hidden)):
            h = ad.relu(self._linear(h, f"dec.h{i}"))
        out = self._linear(h, "dec.out")
        return ad.reshape(out, (batch, n, cfg.freq_bins, cfg.time_frames))

    def forward(self, x, return_slots: bool = False):
        """Full pipeline on [B, F, T] (or a single [F, T]) compressed input."""
        values = x.values if isinstance(x, CompressedMagnitude) else np.asarray(x)
        if values.ndim == 2:
            values = values[None]
        if values.ndim != 3:
            raise ShapeError(f"expected [B, F, T] input, got shape {values.shape}")
        inp = ad.Tensor(values[:, None].astype(self.dtype))
        slots = self.infer_slots(self.encode_features(inp))
        preds = self.decode_slots(slots)
        return (preds, slots) if return_slots else preds
