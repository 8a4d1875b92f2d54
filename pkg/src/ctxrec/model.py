"""Trainable state: embedding tables, probability decoder, graph and GRU weights."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter
from .nn import GruCell, Mlp
from .synthlog import AttributeSchema
from .util import rng_for


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 16                 # embedding width d
    n_prototypes: int = 40
    gat_layers: int = 2
    leaky_slope: float = 4.0      # amplifies the negative range: cross-cluster
                                  # edges need real suppression in the softmax
    sim_mode: str = "js"          # "js" (1 - estimated divergence) or "ip" ablation
    gat_attention: str = "sim"    # "sim" per the gating similarity, or "dot" fallback
    use_gta: bool = True          # False bypasses graph aggregation entirely
    raw_decode: bool = False      # skip per-field normalization (ablation)
    norm_floor: float = 1e-7

    def __post_init__(self):
        if self.dim < 1 or self.n_prototypes < 1 or self.gat_layers < 1:
            raise ValueError("dim, n_prototypes and gat_layers must be positive")
        if self.sim_mode not in ("js", "ip"):
            raise ValueError(f"unknown sim_mode {self.sim_mode!r}")
        if self.gat_attention not in ("sim", "dot"):
            raise ValueError(f"unknown gat_attention {self.gat_attention!r}")


class ContextMatchModel:
    """All trainable parameters plus the dataset vocabulary they index.

    Embedding rows are shared across users; a user's personalized view adds
    their own embedding row (context: u + c_hat, prototype: o_hat + u).
    """

    def __init__(self, schema: AttributeSchema, contexts: tuple, n_users: int,
                 n_pois: int, cfg: ModelConfig, seed: int):
        self.schema = schema
        self.contexts = tuple(contexts)
        self.ctx_index = {c: i for i, c in enumerate(self.contexts)}
        self.n_users = n_users
        self.n_pois = n_pois
        self.cfg = cfg
        d, t = cfg.dim, schema.total_dim

        emb_rng = rng_for(seed, 10)
        self.user_emb = Parameter(emb_rng.uniform(0, 1, size=(n_users, d)))
        self.ctx_emb = Parameter(emb_rng.uniform(0, 1, size=(len(self.contexts), d)))
        self.proto_emb = Parameter(emb_rng.uniform(0, 1, size=(cfg.n_prototypes, d)))
        self.poi_emb = Parameter(emb_rng.uniform(0, 1, size=(n_pois, d)))

        self.decoder = Mlp([d, 4 * t, 4 * t, t], rng_for(seed, 11), out_act="sigmoid")
        # identity start: aggregation begins as pure attention-weighted mixing,
        # which keeps the decoded geometry intact until training reshapes it
        self.gat_w = [Parameter(np.eye(d)) for _ in range(cfg.gat_layers)]
        self.gru = GruCell(d, d, rng_for(seed, 13))

    def named_parameters(self) -> dict:
        named = {
            "user_emb": self.user_emb, "ctx_emb": self.ctx_emb,
            "proto_emb": self.proto_emb, "poi_emb": self.poi_emb,
        }
        for i, p in enumerate(self.decoder.parameters()):
            named[f"decoder.{i}"] = p
        for l, w in enumerate(self.gat_w):
            named[f"gat.w{l}"] = w
        for name, p in zip(("wz", "uz", "bz", "wr", "ur", "br", "wh", "uh", "bh"),
                           self.gru.parameters()):
            named[f"gru.{name}"] = p
        return named

    def parameters(self) -> list[Parameter]:
        return list(self.named_parameters().values())

    def save(self, path):
        ad.save_tensors(path, {k: p.data for k, p in self.named_parameters().items()})

    def load(self, path):
        stored = ad.load_tensors(path)
        for name, p in self.named_parameters().items():
            if name not in stored:
                raise ValueError(f"checkpoint missing tensor {name!r}")
            if stored[name].shape != p.data.shape:
                raise ValueError(f"checkpoint tensor {name!r} has shape "
                                 f"{stored[name].shape}, expected {p.data.shape}")
            p.data[:] = stored[name]

    def with_config(self, **overrides) -> "ContextMatchModel":
        """Same parameters viewed under a modified config (ablation toggles)."""
        clone = object.__new__(ContextMatchModel)
        clone.__dict__.update(self.__dict__)
        clone.cfg = replace(self.cfg, **overrides)
        return clone
