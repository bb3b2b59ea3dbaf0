"""Neural collision detector over latent codes.

A global state encoder digests the whole code into S0; one weight-shared
local predictor maps (S0, z_i) to a scalar collision score S_i per domain
(trained to track per-domain penetration depth, so it stays unsquashed);
a final classifier squashes the stacked scores to a collision probability.
Parameter count grows affinely with the number of domains because the
local predictor is shared.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .autoencoder import LatentLayout


@dataclass
class DetectorConfig:
    n_domains: int = 8
    sub_dim: int = 4
    s0_dim: int = 16
    cse_width: int = 64
    cp_width: int = 32
    clf_width: int = 32
    celu_alpha: float = 1.0
    seed: int = 0

    @property
    def layout(self) -> LatentLayout:
        return LatentLayout(self.n_domains, self.sub_dim)


class Detector:
    def __init__(self, config: DetectorConfig, params: dict | None = None):
        self.config = config
        self.layout = config.layout
        self.params = params if params is not None else self._init_params()

    def _init_params(self) -> dict:
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        params = {}
        params.update(nn.init_mlp(
            rng, "cse", [self.layout.flat_dim, cfg.cse_width, cfg.cse_width, cfg.s0_dim]))
        params.update(nn.init_mlp(
            rng, "cp", [cfg.s0_dim + cfg.sub_dim, cfg.cp_width, cfg.cp_width, 1]))
        params.update(nn.init_mlp(
            rng, "clf", [cfg.n_domains, cfg.clf_width, cfg.clf_width, 1]))
        return params

    def param_count(self) -> int:
        return nn.param_count(self.params)

    # -- tape path --------------------------------------------------------

    def forward_var(self, tape: nn.Tape, leaves: dict, z: nn.Var):
        """Returns (logit (B,1), scores S (B, n_domains)); prob = sigmoid(logit)."""
        cfg = self.config
        n = cfg.n_domains
        s0 = nn.mlp_forward(tape, leaves, "cse", z, hidden="tanh", n_layers=3)
        scores = []
        for i in range(1, n + 1):
            lo = n + (i - 1) * cfg.sub_dim
            zi = tape.slice_cols(z, lo, lo + cfg.sub_dim)
            scores.append(nn.mlp_forward(tape, leaves, "cp", tape.concat([s0, zi]),
                                         hidden="celu", n_layers=3))
        s = tape.concat(scores)
        logit = nn.mlp_forward(tape, leaves, "clf", s, hidden="celu", n_layers=3)
        return logit, s

    # -- numpy path (must agree with the tape path bit-for-bit) -----------

    def _mlp_np(self, prefix: str, x: np.ndarray, hidden: str) -> np.ndarray:
        p = self.params
        act = np.tanh if hidden == "tanh" else _celu
        for layer in range(3):
            x = x @ p[f"{prefix}.w{layer}"] + p[f"{prefix}.b{layer}"]
            if layer < 2:
                x = act(x)
        return x

    def forward(self, z: np.ndarray):
        """(prob, S) for one code or a batch."""
        z = np.asarray(z, dtype=np.float64)
        single = z.ndim == 1
        zb = z[None, :] if single else z
        if zb.shape[-1] != self.layout.flat_dim:
            raise ValueError(f"latent length {zb.shape[-1]} != {self.layout.flat_dim}")
        cfg = self.config
        s0 = self._mlp_np("cse", zb, "tanh")
        scores = []
        for i in range(1, cfg.n_domains + 1):
            zi = self.layout.sub(zb, i)
            scores.append(self._mlp_np("cp", np.concatenate([s0, zi], axis=1), "celu"))
        s = np.concatenate(scores, axis=1)
        logit = self._mlp_np("clf", s, "celu")[:, 0]
        prob = nn.sigmoid(logit)
        if single:
            return float(prob[0]), s[0]
        return prob, s

    def predict(self, z: np.ndarray) -> np.ndarray:
        """Hard collision labels: exactly prob >= 0.5."""
        prob = self.forward(z)[0]
        return (np.asarray(prob) >= 0.5).astype(np.int64)

    def prob_and_grad(self, z: np.ndarray):
        """Probability and its gradient w.r.t. one latent code."""
        probs, grads = self.prob_and_grad_batch(np.asarray(z, dtype=np.float64)[None, :])
        return float(probs[0]), grads[0]

    def prob_and_grad_batch(self, zs: np.ndarray):
        """Row-wise probabilities and gradients for a batch of codes."""
        tape = nn.Tape()
        leaves = nn.leaves_for(tape, self.params)
        zvar = tape.leaf(np.asarray(zs, dtype=np.float64), "z")
        logit, _ = self.forward_var(tape, leaves, zvar)
        prob = tape.sigmoid(logit)
        tape.backward(tape.sum(prob))
        return tape.value(prob)[:, 0].copy(), tape.grad(zvar)

    # -- persistence -------------------------------------------------------

    def save(self, path):
        path = Path(path)
        nn.save_checkpoint(path, self.params)
        path.with_suffix(".meta.json").write_text(
            json.dumps({"config": self.config.__dict__}, indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "Detector":
        path = Path(path)
        meta = json.loads(path.with_suffix(".meta.json").read_text())
        return cls(DetectorConfig(**meta["config"]), params=nn.load_checkpoint(path))

    def clone(self) -> "Detector":
        return Detector(self.config, params={k: v.copy() for k, v in self.params.items()})


def _celu(x, alpha=1.0):
    return np.where(x >= 0, x, alpha * np.expm1(np.minimum(x, 0.0) / alpha))
