"""BiPed: bifold encoders, categorical interaction module, bifold decoders."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .config import BiPedConfig
from .data.grid import GridSpec, grid_class
from .errors import ConfigError, DimensionError, InputError
from .nn import AttentionUnit, ConvStack, DenseLayer, EmbeddingTable, LSTMLayer, ParameterStore
from .tensor import Tensor

CATEGORIES = ("p", "pl", "b", "v", "st")
# ego-motion (m/s) is scaled into roughly unit range before encoding
EGO_SCALE = 0.1


@dataclass
class ObservationBatch:
    """Raw model inputs for B samples (pixels, m/s, binary rasters)."""

    boxes: np.ndarray  # B x m x 4, pixels
    grid: np.ndarray  # B x m, int
    ego: np.ndarray  # B x m x 3
    maps: Optional[np.ndarray] = None  # B x m x 5 x H x W
    future_ego: Optional[np.ndarray] = None  # B x tau x 3

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64)
        self.grid = np.asarray(self.grid, dtype=np.int64)
        self.ego = np.asarray(self.ego, dtype=np.float64)
        if self.boxes.ndim != 3 or self.boxes.shape[2] != 4:
            raise DimensionError(f"boxes must be B x m x 4, got {self.boxes.shape}")
        b, m = self.boxes.shape[:2]
        if self.grid.shape != (b, m):
            raise DimensionError(f"grid classes must be {(b, m)}, got {self.grid.shape}")
        if self.ego.shape != (b, m, 3):
            raise DimensionError(f"ego-motion must be {(b, m, 3)}, got {self.ego.shape}")
        if np.any(self.boxes[..., 0] > self.boxes[..., 2]) or np.any(self.boxes[..., 1] > self.boxes[..., 3]):
            raise InputError("box corners must satisfy x1 <= x2 and y1 <= y2")

    @property
    def size(self):
        return self.boxes.shape[0]


@dataclass
class Targets:
    future_boxes: np.ndarray  # B x tau x 4, pixels
    crossing: np.ndarray  # B, {0, 1}
    final_grid: np.ndarray  # B, int
    future_ego: Optional[np.ndarray] = None  # B x tau x 3


@dataclass
class BranchOutput:
    boxes: Tensor  # B x tau x 4, normalized offsets
    action: Tensor  # B
    grid: Optional[Tensor]  # B x classes


@dataclass
class PredictionBundle:
    boxes: Tensor
    action: Tensor
    grid: Optional[Tensor]
    mip: Optional[BranchOutput]
    mjp: Optional[BranchOutput]
    anchor: np.ndarray  # B x 4, last observed box in pixels
    scale: float
    ego_pred: Optional[Tensor] = None
    attention: Optional[Tensor] = None

    def boxes_pixels(self, boxes=None):
        boxes = self.boxes if boxes is None else boxes
        return self.anchor[:, None, :] + boxes.data * self.scale


def normalize_boxes(boxes, anchor, scale):
    return (np.asarray(boxes, dtype=np.float64) - anchor[:, None, :]) / scale


class BiPedModel:
    """All BiPed parameters plus the forward pipeline for one configuration."""

    def __init__(self, config: BiPedConfig, seed=0):
        self.config = config
        self.seed = seed
        self.grid_spec = GridSpec.from_cell(config.grid_cell, config.image_width, config.image_height)
        rng = np.random.default_rng(seed)
        self.params = ParameterStore()
        cfg, p, hid = config, self.params, config.hidden_size
        n_cls = self.grid_spec.num_classes

        if cfg.use_mie:
            self.mie_box = LSTMLayer(p, "mie.box", 4, hid, rng)
            self.mie_grid_embed = EmbeddingTable(p, "mie.grid_embed", n_cls, cfg.mje_embed_size, rng)
            self.mie_grid = LSTMLayer(p, "mie.grid", cfg.mje_embed_size, hid, rng)
            self.mie_ego = LSTMLayer(p, "mie.ego", 3, hid, rng)
        if cfg.use_mje:
            e = cfg.mje_embed_size
            self.mje_box_embed = DenseLayer(p, "mje.box_embed", 4, e, rng)
            self.mje_grid_embed = EmbeddingTable(p, "mje.grid_embed", n_cls, e, rng)
            self.mje_ego_embed = DenseLayer(p, "mje.ego_embed", 3, e, rng)
            self.mje_lstm = LSTMLayer(p, "mje.lstm", 3 * e, hid, rng)
        if cfg.use_cim:
            self.conv = ConvStack(p, "cim.conv", rng)
            self.conv.output_hw(cfg.map_height, cfg.map_width)
            names = CATEGORIES if cfg.cim_categorical else ("single",)
            self.cim_lstms = [
                LSTMLayer(p, f"cim.lstm.{n}", self.conv.out_dim, cfg.cim_hidden, rng, activation="tanh")
                for n in names
            ]
            f = len(names) * cfg.cim_hidden
            if cfg.use_iau:
                self.iau = AttentionUnit(p, "cim.iau", f, cfg.iau_dim, rng)
            else:
                self.cim_proj = DenseLayer(p, "cim.proj", f, cfg.iau_dim, rng, activation="tanh")

        ego_in = 0 if cfg.ego_future_mode == "none" else 3
        dec_in = self.context_dim + ego_in
        if cfg.ego_future_mode == "predicted":
            self.nep_lstm = LSTMLayer(p, "nep.lstm", self.context_dim, hid, rng)
            self.nep_out = DenseLayer(p, "nep.out", hid, 3, rng)
        if cfg.use_mip:
            self.mip_traj = LSTMLayer(p, "mip.traj", dec_in, hid, rng, activation="tanh")
            self.mip_traj_out = DenseLayer(p, "mip.traj_out", hid, 4, rng)
            self.mip_act = LSTMLayer(p, "mip.act", dec_in, hid, rng)
            self.mip_act_out = DenseLayer(p, "mip.act_out", hid, 1, rng)
            if cfg.use_grid_task:
                self.mip_grid = LSTMLayer(p, "mip.grid", dec_in, hid, rng)
                self.mip_grid_out = DenseLayer(p, "mip.grid_out", hid, n_cls, rng)
        if cfg.use_mjp:
            e = cfg.mjp_embed_size
            self.mjp_lstm = LSTMLayer(p, "mjp.lstm", dec_in, hid, rng)
            self.mjp_fc = DenseLayer(p, "mjp.fc", hid, e, rng)
            self.mjp_traj_out = DenseLayer(p, "mjp.traj_out", e, 4, rng)
            self.mjp_act_out = DenseLayer(p, "mjp.act_out", e, 1, rng)
            if cfg.use_grid_task:
                self.mjp_grid_out = DenseLayer(p, "mjp.grid_out", e, n_cls, rng)

    # -- structure -----------------------------------------------------
    @property
    def context_dim(self):
        cfg = self.config
        return ((cfg.iau_dim if cfg.use_cim else 0)
                + (3 * cfg.hidden_size if cfg.use_mie else 0)
                + (cfg.hidden_size if cfg.use_mje else 0))

    def num_parameters(self):
        return self.params.count()

    # -- inputs --------------------------------------------------------
    def make_batch(self, samples, maps=None):
        """Stack SceneSample-like records into (ObservationBatch, Targets)."""
        cfg = self.config
        boxes = np.stack([s.boxes for s in samples])
        fut = np.stack([s.future_boxes for s in samples])
        if boxes.shape[1] != cfg.obs_len or fut.shape[1] != cfg.pred_len:
            raise DimensionError(
                f"samples have {boxes.shape[1]} observed / {fut.shape[1]} future frames, "
                f"model expects {cfg.obs_len} / {cfg.pred_len}"
            )
        batch = ObservationBatch(
            boxes=boxes,
            grid=grid_class(boxes, self.grid_spec),
            ego=np.stack([s.ego for s in samples]),
            maps=maps,
            future_ego=np.stack([s.future_ego for s in samples]),
        )
        targets = Targets(
            future_boxes=fut,
            crossing=np.array([s.crossing for s in samples], dtype=np.int64),
            final_grid=grid_class(fut[:, -1], self.grid_spec),
            future_ego=batch.future_ego,
        )
        return batch, targets

    def _check_batch(self, batch):
        cfg = self.config
        if batch.boxes.shape[1] != cfg.obs_len:
            raise DimensionError(f"batch has {batch.boxes.shape[1]} observed frames, expected {cfg.obs_len}")
        if batch.grid.size and (batch.grid.min() < 0 or batch.grid.max() >= self.grid_spec.num_classes):
            raise InputError(f"grid classes must lie in [0, {self.grid_spec.num_classes})")

    # -- encoders ------------------------------------------------------
    def _require(self, flag, name):
        if not getattr(self.config, flag):
            raise ConfigError(f"{name} invoked but {flag} is disabled")

    def encode_mie(self, batch, return_ego_state=False):
        self._require("use_mie", "MIE")
        anchor = batch.boxes[:, -1, :]
        box_in = Tensor(normalize_boxes(batch.boxes, anchor, self.config.image_width))
        h_l = self.mie_box.forward(box_in)[:, -1]
        h_g = self.mie_grid.forward(self.mie_grid_embed(batch.grid))[:, -1]
        h_v = self.mie_ego.forward(Tensor(batch.ego * EGO_SCALE))[:, -1]
        out = T.concat([h_l, h_g, h_v], axis=1)
        return (out, h_v) if return_ego_state else out

    def encode_mje(self, batch):
        self._require("use_mje", "MJE")
        anchor = batch.boxes[:, -1, :]
        box_in = Tensor(normalize_boxes(batch.boxes, anchor, self.config.image_width))
        joint = T.concat([
            self.mje_box_embed(box_in),
            self.mje_grid_embed(batch.grid),
            self.mje_ego_embed(Tensor(batch.ego * EGO_SCALE)),
        ], axis=2)
        return self.mje_lstm.forward(joint)[:, -1]

    def category_maps(self, batch):
        cfg = self.config
        if batch.maps is None:
            raise InputError("CIM enabled but the batch carries no category map stack")
        maps = np.asarray(batch.maps, dtype=np.float64)
        expected = (batch.size, cfg.obs_len, len(CATEGORIES), cfg.map_height, cfg.map_width)
        if maps.shape != expected:
            raise DimensionError(f"category maps have shape {maps.shape}, expected {expected}")
        if not cfg.cim_categorical:
            maps = maps.max(axis=2, keepdims=True)
        return maps

    def encode_cim(self, batch, return_attention=False):
        """C_int (B x q); optionally the attention weights (B x m)."""
        self._require("use_cim", "CIM")
        maps = self.category_maps(batch)
        b, m, k, h, w = maps.shape
        feats = self.conv(Tensor(maps.reshape(b * m * k, 1, h, w)))
        feats = feats.reshape(b, m, k, self.conv.out_dim)
        reps = [lstm.forward(feats[:, :, i]) for i, lstm in enumerate(self.cim_lstms)]
        cat_rep = T.concat(reps, axis=2) if len(reps) > 1 else reps[0]
        alpha = None
        if self.config.use_iau:
            c_int, alpha = self.iau(cat_rep)
        else:
            c_int = self.cim_proj(cat_rep[:, -1])
        return (c_int, alpha) if return_attention else c_int

    def build_context(self, c_int=None, c_mie=None, c_mje=None):
        parts = [c for c in (c_int, c_mie, c_mje) if c is not None]
        if not parts:
            raise ConfigError("no context components available")
        return T.concat(parts, axis=1) if len(parts) > 1 else parts[0]

    # -- decoders ------------------------------------------------------
    def _decoder_input(self, c_rep, future_ego):
        b, d = c_rep.shape
        tau = self.config.pred_len
        rep = c_rep.reshape(b, 1, d) * np.ones((1, tau, 1))
        if self.config.ego_future_mode == "none":
            return rep
        if future_ego is None:
            raise InputError("future ego-motion required unless ego_future_mode is 'none'")
        ego = future_ego if isinstance(future_ego, Tensor) else Tensor(np.asarray(future_ego) * EGO_SCALE)
        if ego.shape != (b, tau, 3):
            raise DimensionError(f"future ego-motion must be {(b, tau, 3)}, got {ego.shape}")
        return T.concat([rep, ego], axis=2)

    @staticmethod
    def _heads(traj_h, act_logits, grid_logits):
        action = T.sigmoid(act_logits).reshape(act_logits.shape[0], act_logits.shape[1]).mean(axis=1)
        grid = None if grid_logits is None else T.softmax(grid_logits, axis=2).mean(axis=1)
        return BranchOutput(traj_h, action, grid)

    def decode_mip(self, c_rep, future_ego):
        self._require("use_mip", "MIP")
        x = self._decoder_input(c_rep, future_ego)
        boxes = self.mip_traj_out(self.mip_traj.forward(x))
        act = self.mip_act_out(self.mip_act.forward(x))
        grid = self.mip_grid_out(self.mip_grid.forward(x)) if self.config.use_grid_task else None
        return self._heads(boxes, act, grid)

    def decode_mjp(self, c_rep, future_ego):
        self._require("use_mjp", "MJP")
        x = self._decoder_input(c_rep, future_ego)
        z = self.mjp_fc(self.mjp_lstm.forward(x))
        grid = self.mjp_grid_out(z) if self.config.use_grid_task else None
        return self._heads(self.mjp_traj_out(z), self.mjp_act_out(z), grid)

    def predict_ego(self, c_rep, h_v=None):
        """Planner branch: future ego-motion (B x tau x 3, scaled units)."""
        if self.config.ego_future_mode != "predicted":
            raise ConfigError("predict_ego requires ego_future_mode = predicted")
        b, d = c_rep.shape
        x = c_rep.reshape(b, 1, d) * np.ones((1, self.config.pred_len, 1))
        return self.nep_out(self.nep_lstm.forward(x, h0=h_v))

    # -- pipeline ------------------------------------------------------
    def forward(self, batch, ego_predictor=None):
        """Full pipeline; ``ego_predictor(batch)`` overrides the NEP planner."""
        cfg = self.config
        self._check_batch(batch)
        c_int = c_mie = c_mje = h_v = attention = None
        if cfg.use_cim:
            c_int, attention = self.encode_cim(batch, return_attention=True)
        if cfg.use_mie:
            c_mie, h_v = self.encode_mie(batch, return_ego_state=True)
        if cfg.use_mje:
            c_mje = self.encode_mje(batch)
        c_rep = self.build_context(c_int, c_mie, c_mje)

        ego_pred = None
        future = batch.future_ego
        if cfg.ego_future_mode == "predicted":
            if ego_predictor is not None:
                future = ego_predictor(batch)
            else:
                ego_pred = self.predict_ego(c_rep, h_v)
                future = ego_pred
        elif cfg.ego_future_mode == "none":
            future = None

        mip = self.decode_mip(c_rep, future) if cfg.use_mip else None
        mjp = self.decode_mjp(c_rep, future) if cfg.use_mjp else None
        fused = fuse(mip, mjp)
        return PredictionBundle(
            boxes=fused.boxes, action=fused.action, grid=fused.grid, mip=mip, mjp=mjp,
            anchor=batch.boxes[:, -1, :].copy(), scale=float(cfg.image_width),
            ego_pred=ego_pred, attention=attention,
        )

    __call__ = forward


def fuse(mip, mjp):
    """Per-task arithmetic mean over the enabled decoder branches."""
    branches = [o for o in (mip, mjp) if o is not None]
    if not branches:
        raise ConfigError("fusion needs at least one decoder output")
    if len(branches) == 1:
        return branches[0]
    a, b = branches

    def mean(x, y):
        return None if x is None else (x + y) * 0.5

    return BranchOutput(mean(a.boxes, b.boxes), mean(a.action, b.action), mean(a.grid, b.grid))
