"""Bilevel mesh autoencoder with attention-based domain decomposition.

Level 1 maps the whole displacement field to a short code z0; a learnable
row-softmax attention over vertices splits the mesh into one near-rigid
domain per z0 axis, and one small level-2 autoencoder per domain encodes
the attention-masked residual.  The decoder is the sum of all sub-decoder
outputs, each masked by its attention column, so zeroing one sub-decoder
changes the reconstruction by exactly that term.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn


class TrainingDivergedError(ArithmeticError):
    pass


@dataclass(frozen=True)
class LatentLayout:
    """Flat latent code layout: [z0 | z_1 | ... | z_n], domains 1-based."""

    n_domains: int
    sub_dim: int

    @property
    def flat_dim(self) -> int:
        return self.n_domains * (1 + self.sub_dim)

    def z0(self, z: np.ndarray) -> np.ndarray:
        return z[..., : self.n_domains]

    def sub(self, z: np.ndarray, i: int) -> np.ndarray:
        if not 1 <= i <= self.n_domains:
            raise IndexError(f"domain index {i} outside [1, {self.n_domains}]")
        lo = self.n_domains + (i - 1) * self.sub_dim
        return z[..., lo : lo + self.sub_dim]


@dataclass
class AutoencoderConfig:
    n_domains: int = 8
    sub_dim: int = 4
    width: int = 128
    sparsity_weight: float = 0.01
    lr: float = 0.01
    batch_size: int = 128
    epochs: int = 800
    seed: int = 0

    @property
    def layout(self) -> LatentLayout:
        return LatentLayout(self.n_domains, self.sub_dim)


class BilevelAutoencoder:
    def __init__(self, feature_dim: int, n_vertices: int, config: AutoencoderConfig,
                 params: dict | None = None):
        if feature_dim != 3 * n_vertices:
            raise ValueError("feature_dim must be 3 * n_vertices")
        self.feature_dim = feature_dim
        self.n_vertices = n_vertices
        self.config = config
        self.layout = config.layout
        self.params = params if params is not None else self._init_params()

    def _init_params(self) -> dict:
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        w = cfg.width
        params = {}
        params.update(nn.init_mlp(rng, "enc0", [self.feature_dim, w, w, cfg.n_domains]))
        params.update(nn.init_mlp(rng, "dec0", [cfg.n_domains, w, w, self.feature_dim]))
        for i in range(1, cfg.n_domains + 1):
            params.update(nn.init_mlp(rng, f"enc{i}", [self.feature_dim, w, w, cfg.sub_dim]))
            params.update(nn.init_mlp(rng, f"dec{i}", [cfg.sub_dim + 1, w, w, self.feature_dim]))
        params["attn"] = rng.normal(0.0, 0.01, size=(self.n_vertices, cfg.n_domains))
        return params

    # -- attention ------------------------------------------------------

    def attention(self) -> np.ndarray:
        """Row-stochastic vertex-to-domain weights, (V, n_domains)."""
        logits = self.params["attn"]
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    def domain_map(self) -> np.ndarray:
        """1-based domain id per vertex; ties go to the lowest domain."""
        return self.attention().argmax(axis=1) + 1

    # -- tape forward pass ----------------------------------------------

    def _masks_var(self, tape: nn.Tape, leaves: dict):
        """Per-domain coordinate masks (3V,) from the attention softmax."""
        att = tape.softmax(leaves["attn"])
        return [tape.repeat(tape.slice_cols(att, i, i + 1), 3) for i in range(self.config.n_domains)], att

    def decode_var(self, tape: nn.Tape, leaves: dict, z: nn.Var, masks=None) -> nn.Var:
        """Sum of sub-decoder outputs; z is (B, flat_dim)."""
        n = self.config.n_domains
        if masks is None:
            masks, _ = self._masks_var(tape, leaves)
        z0 = tape.slice_cols(z, 0, n)
        out = nn.mlp_forward(tape, leaves, "dec0", z0, hidden="tanh", n_layers=3)
        for i in range(1, n + 1):
            lo = n + (i - 1) * self.config.sub_dim
            zi = tape.slice_cols(z, lo, lo + self.config.sub_dim)
            z0i = tape.slice_cols(z, i - 1, i)
            raw = nn.mlp_forward(tape, leaves, f"dec{i}", tape.concat([zi, z0i]),
                                 hidden="tanh", n_layers=3)
            out = tape.add(out, tape.mul(raw, masks[i - 1]))
        return out

    def encode_var(self, tape: nn.Tape, leaves: dict, f: nn.Var, masks=None) -> nn.Var:
        n = self.config.n_domains
        if masks is None:
            masks, _ = self._masks_var(tape, leaves)
        z0 = nn.mlp_forward(tape, leaves, "enc0", f, hidden="tanh", n_layers=3)
        f0 = nn.mlp_forward(tape, leaves, "dec0", z0, hidden="tanh", n_layers=3)
        residual = tape.sub(f, f0)
        parts = [z0]
        for i in range(1, n + 1):
            zi = nn.mlp_forward(tape, leaves, f"enc{i}", tape.mul(residual, masks[i - 1]),
                                hidden="tanh", n_layers=3)
            parts.append(zi)
        return tape.concat(parts)

    # -- numpy fast paths (used by the labeling oracle; must match the tape) --

    def _mlp_np(self, prefix: str, x: np.ndarray) -> np.ndarray:
        p = self.params
        for layer in range(3):
            x = x @ p[f"{prefix}.w{layer}"] + p[f"{prefix}.b{layer}"]
            if layer < 2:
                x = np.tanh(x)
        return x

    def decode(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        single = z.ndim == 1
        zb = z[None, :] if single else z
        if zb.shape[-1] != self.layout.flat_dim:
            raise ValueError(f"latent length {zb.shape[-1]} != {self.layout.flat_dim}")
        n = self.config.n_domains
        att = self.attention()
        out = self._mlp_np("dec0", zb[:, :n])
        for i in range(1, n + 1):
            zi = self.layout.sub(zb, i)
            inp = np.concatenate([zi, zb[:, i - 1 : i]], axis=1)
            mask = np.repeat(att[:, i - 1], 3)
            out = out + self._mlp_np(f"dec{i}", inp) * mask
        return out[0] if single else out

    def encode(self, f: np.ndarray) -> np.ndarray:
        f = np.asarray(f, dtype=np.float64)
        single = f.ndim == 1
        fb = f[None, :] if single else f
        if fb.shape[-1] != self.feature_dim:
            raise ValueError(f"feature length {fb.shape[-1]} != {self.feature_dim}")
        n = self.config.n_domains
        att = self.attention()
        z0 = self._mlp_np("enc0", fb)
        residual = fb - self._mlp_np("dec0", z0)
        parts = [z0]
        for i in range(1, n + 1):
            mask = np.repeat(att[:, i - 1], 3)
            parts.append(self._mlp_np(f"enc{i}", residual * mask))
        z = np.concatenate(parts, axis=1)
        return z[0] if single else z

    # -- persistence -----------------------------------------------------

    def save(self, path):
        path = Path(path)
        nn.save_checkpoint(path, self.params)
        meta = {
            "feature_dim": self.feature_dim,
            "n_vertices": self.n_vertices,
            "config": self.config.__dict__,
        }
        path.with_suffix(".meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "BilevelAutoencoder":
        path = Path(path)
        meta = json.loads(path.with_suffix(".meta.json").read_text())
        config = AutoencoderConfig(**meta["config"])
        params = nn.load_checkpoint(path)
        return cls(meta["feature_dim"], meta["n_vertices"], config, params=params)


@dataclass
class TrainingLog:
    rows: list = field(default_factory=list)  # (epoch, loss)

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("epoch,loss\n")
            for epoch, loss in self.rows:
                fh.write(f"{epoch},{loss:.17g}\n")


def _attention_entropy(tape: nn.Tape, att: nn.Var) -> nn.Var:
    logp = tape.log(tape.add_const(att, 1e-12))
    return tape.scale(tape.mean(tape.sum_axis(tape.mul(att, logp), axis=1)), -1.0)


def train_autoencoder(features: np.ndarray, config: AutoencoderConfig,
                      model: BilevelAutoencoder | None = None) -> tuple[BilevelAutoencoder, TrainingLog]:
    """Joint reconstruction + attention-sparsity training with Adam.

    Needs at least 2 meshes of identical topology; raises
    TrainingDivergedError if the loss goes non-finite.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or len(features) < 2:
        raise ValueError("training needs a (N >= 2, feature_dim) array")
    if model is None:
        model = BilevelAutoencoder(features.shape[1], features.shape[1] // 3, config)
    rng = np.random.default_rng(config.seed + 1)
    adam = nn.AdamState(lr=config.lr)
    log = TrainingLog()
    n = len(features)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        batches = 0
        for lo in range(0, n, config.batch_size):
            batch = features[order[lo : lo + config.batch_size]]
            tape = nn.Tape()
            leaves = nn.leaves_for(tape, model.params)
            masks, att = model._masks_var(tape, leaves)
            try:
                z = model.encode_var(tape, leaves, tape.leaf(batch, "batch"), masks)
                recon = model.decode_var(tape, leaves, z, masks)
                loss = tape.mean(tape.square(tape.sub(recon, tape.leaf(batch, "target"))))
                if config.sparsity_weight:
                    loss = tape.add(loss, tape.scale(_attention_entropy(tape, att),
                                                     config.sparsity_weight))
            except nn.NonFiniteError as err:
                raise TrainingDivergedError(f"epoch {epoch}: {err}") from err
            tape.backward(loss)
            grads = {k: tape.grad(v) for k, v in leaves.items()}
            model.params = nn.adam_step(adam, model.params, grads)
            epoch_loss += float(tape.value(loss))
            batches += 1
        log.rows.append((epoch, epoch_loss / batches))
    return model, log


def reconstruction_report(model: BilevelAutoencoder, features: np.ndarray) -> dict:
    """Round-trip error metrics used by the training acceptance gates."""
    recon = model.decode(model.encode(features))
    diff = recon - features
    per_vertex = np.linalg.norm(diff.reshape(len(features), -1, 3), axis=2)
    norms = np.linalg.norm(features, axis=1)
    rel = np.linalg.norm(diff, axis=1) / np.maximum(norms, 1e-12)
    return {
        "mean_per_vertex_error": float(per_vertex.mean()),
        "max_per_vertex_error": float(per_vertex.max()),
        "mean_relative_error": float(rel.mean()),
        "mse": float((diff ** 2).mean()),
    }
