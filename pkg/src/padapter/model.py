"""A frozen miniature encoder-decoder transformer hosting adapter slots."""
from __future__ import annotations

import dataclasses
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import numeric as nc
from .adapters import Adapter, PAdapter, adapter_forward, effective_p, graph_adapter_forward
from .attention import CONCAT_MODES, AttentionWeights, attention, augment, causal_mask
from .message_passing import AggregationStrategy

POSITIONS = ("ffn", "sa", "ca")
ADAPTER_KINDS = ("none", "adapter", "p_adapter")
LN_EPS = 1e-5


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    layers: int = 4
    d_model: int = 64
    heads: int = 4
    ffn_hidden: int = 256
    vocab: int = 64
    enc_tokens: int = 16
    enc_in: int = 16
    max_len: int = 32
    adapter_kind: str = "adapter"
    adapter_hidden: int | None = None  # defaults to d_model // 8
    positions: tuple = POSITIONS
    p_mode: str = "learnable"
    p: float = 1.5
    mu: float = 1.0
    eps: float = 1e-8
    concat_mode: str = "query"
    aggregation: AggregationStrategy = field(default_factory=AggregationStrategy)

    def __post_init__(self):
        self.positions = tuple(self.positions)
        if self.adapter_hidden is None:
            self.adapter_hidden = max(1, self.d_model // 8)
        if self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if self.adapter_kind not in ADAPTER_KINDS:
            raise ConfigError(f"unknown adapter kind {self.adapter_kind!r}")
        bad = set(self.positions) - set(POSITIONS)
        if bad:
            raise ConfigError(f"unknown insertion positions {sorted(bad)}")
        if self.adapter_kind != "none" and not self.positions:
            raise ConfigError("an adapter model needs at least one insertion position")
        if self.concat_mode not in CONCAT_MODES:
            raise ConfigError(f"unknown concat mode {self.concat_mode!r}")
        if not 0 < self.adapter_hidden < self.d_model:
            raise ConfigError(f"adapter_hidden must lie in (0, d_model), got {self.adapter_hidden}")
        for name in ("layers", "vocab", "enc_tokens", "enc_in", "max_len", "ffn_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["positions"] = list(self.positions)
        d["aggregation"].pop("p_cfg", None)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        agg = d.pop("aggregation", None) or {}
        if isinstance(agg, dict):
            agg = AggregationStrategy(**{k: v for k, v in agg.items() if k != "p_cfg"})
        return cls(aggregation=agg, **d)


@dataclass
class DecoderBlock:
    sa: AttentionWeights
    ca: AttentionWeights
    w1: np.ndarray
    w2: np.ndarray
    ln: dict  # name -> (gain, offset) for "sa", "ca", "ffn"
    slots: dict  # position -> Adapter | PAdapter | None


def _layer_norm(x, gain, offset):
    d = ag.value(x).shape[-1]
    mean = ag.mul(ag.reduce_sum(x, axis=-1, keepdims=True), 1.0 / d)
    xc = ag.sub(x, mean)
    var = ag.mul(ag.reduce_sum(ag.square(xc), axis=-1, keepdims=True), 1.0 / d)
    return ag.add(ag.mul(ag.div(xc, ag.sqrt(ag.add(var, LN_EPS))), gain), offset)


class ToyModel:
    def __init__(self, cfg: ModelConfig, seed: int):
        self.cfg = cfg
        self.seed = int(seed)
        d = cfg.d_model
        std = 1.0 / np.sqrt(d)
        rng = nc.make_rng(seed)
        self.embed = rng.standard_normal((cfg.vocab, d)) * std
        self.pos = rng.standard_normal((cfg.max_len, d)) * std
        self.enc_w = rng.standard_normal((cfg.enc_in, d)) * std
        self.enc_pos = rng.standard_normal((cfg.enc_tokens, d)) * std
        self.blocks: list[DecoderBlock] = []
        for _ in range(cfg.layers):
            sa = AttentionWeights.random(rng, d, d, cfg.heads, std)
            ca = AttentionWeights.random(rng, d, d, cfg.heads, std)
            w1 = rng.standard_normal((d, cfg.ffn_hidden)) * std
            w2 = rng.standard_normal((cfg.ffn_hidden, d)) * std
            ln = {k: (np.ones(d), np.zeros(d)) for k in POSITIONS}
            self.blocks.append(DecoderBlock(sa, ca, w1, w2, ln, {k: None for k in POSITIONS}))
        self.ln_f = (np.ones(d), np.zeros(d))
        self.w_vocab = rng.standard_normal((d, cfg.vocab)) * std

        # adapters draw from their own stream so frozen weights do not depend on adapter settings
        arng = nc.make_rng(self.seed ^ 0x5EED_ADA9)
        if cfg.adapter_kind != "none":
            for block in self.blocks:
                for pos in POSITIONS:
                    if pos not in cfg.positions:
                        continue
                    a = Adapter.init(arng, d, cfg.adapter_hidden)
                    if cfg.adapter_kind == "p_adapter" and pos != "ffn":
                        block.slots[pos] = PAdapter(a, mu=cfg.mu, eps=cfg.eps, p_mode=cfg.p_mode,
                                                    p_fixed=cfg.p, strategy=cfg.aggregation)
                    else:
                        block.slots[pos] = a

    # ------------------------------------------------------------ parameters

    def named_frozen(self) -> list[tuple[str, np.ndarray]]:
        out = [("embed", self.embed), ("pos", self.pos), ("enc_w", self.enc_w), ("enc_pos", self.enc_pos)]
        for i, b in enumerate(self.blocks):
            for tag, w in (("sa", b.sa), ("ca", b.ca)):
                out += [(f"blocks.{i}.{tag}.w_q", w.w_q), (f"blocks.{i}.{tag}.w_k", w.w_k),
                        (f"blocks.{i}.{tag}.w_v", w.w_v), (f"blocks.{i}.{tag}.w_o", w.w_o)]
            out += [(f"blocks.{i}.ffn.w1", b.w1), (f"blocks.{i}.ffn.w2", b.w2)]
            for k in POSITIONS:
                out += [(f"blocks.{i}.ln_{k}.gain", b.ln[k][0]), (f"blocks.{i}.ln_{k}.offset", b.ln[k][1])]
        out += [("ln_f.gain", self.ln_f[0]), ("ln_f.offset", self.ln_f[1]), ("w_vocab", self.w_vocab)]
        return out

    def named_parameters(self) -> list[tuple[str, ag.Var]]:
        out = []
        for i, b in enumerate(self.blocks):
            for pos in POSITIONS:
                slot = b.slots[pos]
                if slot is None:
                    continue
                a = slot.adapter if isinstance(slot, PAdapter) else slot
                out += [(f"blocks.{i}.{pos}.w_down", a.w_down), (f"blocks.{i}.{pos}.w_up", a.w_up)]
                if isinstance(slot, PAdapter) and slot.rho in slot.parameters():
                    out.append((f"blocks.{i}.{pos}.rho", slot.rho))
        return out

    def parameters(self) -> list[ag.Var]:
        return [v for _, v in self.named_parameters()]

    @property
    def n_frozen_params(self) -> int:
        return int(sum(w.size for _, w in self.named_frozen()))

    def p_adapters(self) -> list[tuple[str, PAdapter]]:
        return [(f"blocks.{i}.{pos}", b.slots[pos]) for i, b in enumerate(self.blocks)
                for pos in POSITIONS if isinstance(b.slots[pos], PAdapter)]

    def layer_p(self) -> list[float]:
        """Mean effective p over the p-Laplacian adapters of each layer (nan when a layer has none)."""
        out = []
        for b in self.blocks:
            ps = [float(ag.value(effective_p(s)).item()) for s in b.slots.values()
                  if isinstance(s, PAdapter) and s.strategy.kind == "p_laplacian"]
            out.append(float(np.mean(ps)) if ps else float("nan"))
        return out


def build_model(cfg: ModelConfig, seed: int) -> ToyModel:
    return ToyModel(cfg, seed)


def encode(model: ToyModel, enc_inputs) -> np.ndarray:
    """Frozen random featurizer: ``enc_inputs @ W_enc + positional``."""
    x = np.asarray(enc_inputs, dtype=nc.DTYPE)
    if x.shape[-2:] != (model.cfg.enc_tokens, model.cfg.enc_in):
        raise nc.ShapeError(f"encoder input must end in {(model.cfg.enc_tokens, model.cfg.enc_in)}, got {x.shape}")
    return x @ model.enc_w + model.enc_pos


def _noise_rng(model: ToyModel, layer: int, pos: str) -> np.random.Generator:
    return nc.make_rng(zlib.crc32(f"{model.seed}:{layer}:{pos}".encode()))


def _attention_slot(model, layer, pos, h_q, h_kv, weights, mask, slot, capture):
    out, inter = attention(h_q, h_kv, h_kv, weights, mask)
    details = None
    if isinstance(slot, PAdapter):
        aug = augment(inter, model.cfg.concat_mode, _noise_rng(model, layer, pos))
        details = {}
        y = graph_adapter_forward(aug, slot, details)
    elif isinstance(slot, Adapter):
        y = adapter_forward(out, slot)
    else:
        y = out
    if capture is not None and capture.get("layer") == layer and capture.get("which") == pos:
        capture["M"] = ag.value(inter.m_avg)
        if details and "mbar" in details:
            nq = inter.n_query
            capture["M_bar_full"] = ag.value(details["mbar"])
            capture["M_bar"] = ag.value(details["mbar"])[..., :nq, nq:]
    return y


def decoder_forward(model: ToyModel, tokens, enc_features, capture: dict | None = None):
    """Logits ``(..., T, vocab)``; tokens are integer ids of shape ``(T,)`` or ``(B, T)``."""
    cfg = model.cfg
    tokens = np.asarray(tokens)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab):
        raise ValueError(f"token ids must lie in [0, {cfg.vocab})")
    T = tokens.shape[-1]
    if not 1 <= T <= cfg.max_len:
        raise ValueError(f"sequence length {T} outside [1, {cfg.max_len}]")
    enc = np.asarray(enc_features, dtype=nc.DTYPE)
    if enc.shape[-2:] != (cfg.enc_tokens, cfg.d_model):
        raise nc.ShapeError(f"encoder features must end in {(cfg.enc_tokens, cfg.d_model)}, got {enc.shape}")
    x = model.embed[tokens] + model.pos[:T]
    mask = causal_mask(T)
    for i, b in enumerate(model.blocks):
        h = _layer_norm(x, *b.ln["sa"])
        x = ag.add(x, _attention_slot(model, i, "sa", h, h, b.sa, mask, b.slots["sa"], capture))
        h = _layer_norm(x, *b.ln["ca"])
        x = ag.add(x, _attention_slot(model, i, "ca", h, enc, b.ca, None, b.slots["ca"], capture))
        h = _layer_norm(x, *b.ln["ffn"])
        f = ag.matmul(ag.relu(ag.matmul(h, b.w1)), b.w2)
        if b.slots["ffn"] is not None:
            f = adapter_forward(f, b.slots["ffn"])
        x = ag.add(x, f)
    return ag.matmul(_layer_norm(x, *model.ln_f), model.w_vocab)


def dump_attention(model: ToyModel, tokens, enc_features, layer: int, which: str) -> dict:
    """Head-averaged attention of one slot and, for p-adapter slots, its renormalized
    query-to-key block ``M_bar``."""
    if not 0 <= layer < model.cfg.layers:
        raise ValueError(f"layer must lie in [0, {model.cfg.layers})")
    if which not in ("sa", "ca"):
        raise ValueError("which must be 'sa' or 'ca'")
    cap = {"layer": layer, "which": which}
    decoder_forward(model, tokens, enc_features, cap)
    return {"M": cap["M"], "M_bar": cap.get("M_bar")}


# ------------------------------------------------------------------ checkpoints

MANIFEST = "manifest.json"
BLOB = "weights.bin"


def _all_tensors(model: ToyModel) -> list[tuple[str, np.ndarray]]:
    return model.named_frozen() + [(n, v.value) for n, v in model.named_parameters()]


def save_checkpoint(model: ToyModel, directory, run_config: dict | None = None) -> Path:
    """Manifest (JSON) plus one little-endian float64 blob in manifest order.

    ``run_config`` (the full run configuration) is stored verbatim when given.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = _all_tensors(model)
    manifest = {
        "format": "padapter-checkpoint/1",
        "dtype": "<f8",
        "seed": model.seed,
        "config": model.cfg.to_dict(),
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in tensors],
    }
    if run_config is not None:
        manifest["run_config"] = run_config
    with open(directory / BLOB, "wb") as fh:
        for _, a in tensors:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=2))
    return directory


class CheckpointError(ValueError):
    pass


def read_manifest(directory) -> dict:
    try:
        return json.loads((Path(directory) / MANIFEST).read_text())
    except FileNotFoundError as exc:
        raise CheckpointError(f"missing checkpoint file: {exc.filename}") from exc


def load_checkpoint(directory) -> ToyModel:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / MANIFEST).read_text())
        blob = np.frombuffer((directory / BLOB).read_bytes(), dtype="<f8")
    except FileNotFoundError as exc:
        raise CheckpointError(f"missing checkpoint file: {exc.filename}") from exc
    model = build_model(ModelConfig.from_dict(manifest["config"]), manifest["seed"])
    expected = _all_tensors(model)
    entries = manifest["tensors"]
    if [e["name"] for e in entries] != [n for n, _ in expected]:
        raise CheckpointError("tensor names/order do not match the configured model")
    total = sum(int(np.prod(e["shape"])) for e in entries)
    if total != blob.size:
        raise CheckpointError(f"blob holds {blob.size} values, manifest lists {total}")
    offset = 0
    for e, (name, arr) in zip(entries, expected):
        if tuple(e["shape"]) != arr.shape:
            raise CheckpointError(f"{name}: shape {tuple(e['shape'])} != expected {arr.shape}")
        n = arr.size
        arr[...] = blob[offset:offset + n].reshape(arr.shape)
        offset += n
    return model
