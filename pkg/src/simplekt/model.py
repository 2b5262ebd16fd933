"""The knowledge-tracing network.

Each KC-level step gets a query-side embedding ``x`` and an interaction
embedding ``y``::

    x = Z[kc] + M[q] * V[kc]        (full)
    x = Z[kc] + m_q  * V[kc]        (scalardiff, one scalar per question)
    x = Z[kc]                       (nodiff)
    y = Z[kc] + R[response]

The knowledge state at step ``p`` is multi-head scaled dot-product attention
with query ``x_p`` over keys ``x_j`` and values ``y_j`` of earlier
interactions, and the logit is a two-layer ReLU head on ``[h_p; x_p]``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .data import Batch
from .numerics import Tensor

VARIANTS = ("full", "scalardiff", "nodiff")
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    n_kcs: int
    n_questions: int
    d: int = 64
    n_blocks: int = 1
    n_heads: int = 4
    dropout: float = 0.1
    variant: str = "full"
    seed: int = 42

    def validate(self) -> "ModelConfig":
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.n_kcs < 1 or self.n_questions < 1 or self.d < 1:
            raise ConfigError("n_kcs, n_questions and d must be positive")
        if self.n_heads < 1 or self.d % self.n_heads:
            raise ConfigError(f"d={self.d} is not divisible by n_heads={self.n_heads}")
        if self.n_blocks < 1:
            raise ConfigError("n_blocks must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        return self


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d = cfg.d
    shapes: dict[str, tuple[int, ...]] = {"Z": (cfg.n_kcs, d), "R": (2, d)}
    if cfg.variant == "full":
        shapes["M"] = (cfg.n_questions, d)
    elif cfg.variant == "scalardiff":
        shapes["M"] = (cfg.n_questions, 1)
    if cfg.variant != "nodiff":
        shapes["V"] = (cfg.n_kcs, d)
    for k in range(cfg.n_blocks):
        for w in ("WQ", "WK", "WV", "WO"):
            shapes[f"block{k}.{w}"] = (d, d)
        if k > 0:
            shapes[f"block{k}.ln_gamma"] = (d,)
            shapes[f"block{k}.ln_beta"] = (d,)
    shapes.update({"W1": (d, 2 * d), "b1": (d,), "W2": (d, d), "b2": (d,), "w": (d, 1), "b": (1,)})
    return shapes


def init_params(cfg: ModelConfig) -> dict[str, Tensor]:
    """Uniform(-1/sqrt(d), 1/sqrt(d)) for arrays, zeros for biases, ones for LN gains."""
    rng = nx.make_rng(cfg.seed, "init")
    bound = 1.0 / math.sqrt(cfg.d)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.split(".")[-1]
        if leaf in ("b1", "b2", "b", "ln_beta"):
            arr = np.zeros(shape)
        elif leaf == "ln_gamma":
            arr = np.ones(shape)
        else:
            arr = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(arr, requires_grad=True)
    return params


def visibility(batch: Batch, observed: np.ndarray | None = None) -> np.ndarray:
    """``[B, L, L]`` boolean: may query ``p`` attend to key ``j``.

    ``j`` must be valid and precede the first step of ``p``'s interaction.
    With ``observed`` (prefix lengths per row), queries at or past the prefix
    see only the prefix.
    """
    B, L = batch.shape
    j = np.arange(L)
    vis = (j[None, None, :] < batch.group_start[:, :, None]) & batch.valid_mask[:, None, :]
    if observed is not None:
        obs = np.asarray(observed)[:, None, None]
        future = np.arange(L)[None, :, None] >= obs
        vis &= ~future | (j[None, None, :] < obs)
    return vis


class SimpleKT:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None):
        self.config = config.validate()
        self.params = params if params is not None else init_params(config)
        expected = param_shapes(config)
        if set(self.params) != set(expected):
            raise ConfigError(f"parameter names {sorted(self.params)} do not match {sorted(expected)}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ConfigError(f"{name}: shape {self.params[name].shape} != expected {shape}")

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    # -- pieces ---------------------------------------------------------------

    def embed(self, kc_ids: np.ndarray, question_ids: np.ndarray, responses: np.ndarray) -> tuple[Tensor, Tensor]:
        p = self.params
        z = nx.gather_rows(p["Z"], kc_ids)
        if self.config.variant == "nodiff":
            x = z
        else:
            diff = nx.gather_rows(p["M"], question_ids)
            x = nx.add(z, nx.mul(diff, nx.gather_rows(p["V"], kc_ids)))
        y = nx.add(z, nx.gather_rows(p["R"], responses))
        return x, y

    def _attend(self, k: int, query: Tensor, keys: Tensor, values: Tensor, vis, training, rng) -> Tensor:
        p = self.params
        H = self.config.n_heads
        dh = self.config.d // H
        q = nx.linear(query, p[f"block{k}.WQ"])
        kk = nx.linear(keys, p[f"block{k}.WK"])
        v = nx.linear(values, p[f"block{k}.WV"])
        heads = []
        for h in range(H):
            lo, hi = h * dh, (h + 1) * dh
            scores = nx.scale(nx.matmul(nx.take_last(q, lo, hi), nx.transpose(nx.take_last(kk, lo, hi))), 1.0 / math.sqrt(dh))
            att = nx.softmax_masked(scores, vis, empty="zero")
            att = nx.dropout(att, self.config.dropout, training, rng)
            heads.append(nx.matmul(att, nx.take_last(v, lo, hi)))
        out = heads[0] if H == 1 else nx.concat(heads, axis=-1)
        return nx.linear(out, p[f"block{k}.WO"])

    def knowledge_states(self, x: Tensor, y: Tensor, vis: np.ndarray, training=False, rng=None) -> Tensor:
        h = self._attend(0, x, x, y, vis, training, rng)
        for k in range(1, self.config.n_blocks):
            a = self._attend(k, h, x, h, vis, training, rng)
            h = nx.layer_norm(nx.add(h, a), self.params[f"block{k}.ln_gamma"], self.params[f"block{k}.ln_beta"])
        return h

    def head(self, h: Tensor, x: Tensor, training=False, rng=None) -> Tensor:
        p = self.params
        drop = self.config.dropout
        hidden = nx.relu(nx.linear(nx.concat([h, x], axis=-1), p["W1"], p["b1"]))
        hidden = nx.dropout(hidden, drop, training, rng)
        hidden = nx.relu(nx.linear(hidden, p["W2"], p["b2"]))
        hidden = nx.dropout(hidden, drop, training, rng)
        logit = nx.add(nx.matmul(hidden, p["w"]), p["b"])
        return nx.reshape(logit, logit.shape[:-1])

    # -- whole sequences ------------------------------------------------------

    def forward(
        self,
        batch: Batch,
        training: bool = False,
        rng: np.random.Generator | None = None,
        observed: np.ndarray | None = None,
    ) -> tuple[Tensor, np.ndarray]:
        """Logits ``[B, L]`` and the mask of positions that count as predictions."""
        if training and self.config.dropout > 0 and rng is None:
            raise ValueError("training with dropout needs an rng")
        x, y = self.embed(batch.kc_ids, batch.question_ids, batch.responses)
        vis = visibility(batch, observed)
        h = self.knowledge_states(x, y, vis, training, rng)
        logits = self.head(h, x, training, rng)
        mask = batch.predict_mask()
        if observed is not None:
            mask = mask & (np.arange(batch.shape[1])[None, :] >= np.asarray(observed)[:, None])
        return logits, mask

    def loss(self, batch: Batch, training: bool = False, rng=None) -> tuple[Tensor, int]:
        """Summed BCE over prediction positions, and how many there were."""
        logits, mask = self.forward(batch, training, rng)
        return nx.bce_with_logits(logits, batch.responses, mask), int(mask.sum())

    def predict_proba(self, batch: Batch, observed=None) -> tuple[np.ndarray, np.ndarray]:
        logits, mask = self.forward(batch, training=False, observed=observed)
        return nx.sigmoid(logits).data, mask

    # -- persistence ----------------------------------------------------------

    def save(self, path: str | Path) -> None:
        arrays = {f"param/{k}": v.data for k, v in self.params.items()}
        meta = json.dumps({"version": CHECKPOINT_VERSION, "config": asdict(self.config)}, sort_keys=True)
        with open(path, "wb") as fh:
            np.savez(fh, __meta__=np.array(meta), **arrays)

    @classmethod
    def load(cls, path: str | Path, config: ModelConfig | None = None) -> "SimpleKT":
        """Load a checkpoint, refusing shape or config mismatches."""
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["__meta__"]))
            if meta.get("version") != CHECKPOINT_VERSION:
                raise ConfigError(f"unsupported checkpoint version {meta.get('version')}")
            stored = ModelConfig(**meta["config"])
            if config is not None and asdict(config) != asdict(stored):
                raise ConfigError(f"checkpoint config {asdict(stored)} != requested {asdict(config)}")
            params = {k[len("param/") :]: Tensor(z[k], requires_grad=True) for k in z.files if k.startswith("param/")}
        return cls(stored, params)


# ---------------------------------------------------------------------------
# single-step views of the same computation


def embed_step(kc_id: int, question_id: int, response: int, params: dict[str, Tensor], variant: str):
    """``(x, y)`` for one step, each of shape ``[d]``."""
    for name, idx in (("Z", kc_id),) + ((("M", question_id),) if variant != "nodiff" else ()):
        if not 0 <= idx < params[name].shape[0]:
            raise IndexError(f"{name} index {idx} out of range")
    if response not in (0, 1):
        raise IndexError(f"response index {response} out of range")
    z = params["Z"].data[kc_id]
    if variant == "nodiff":
        x = z.copy()
    else:
        x = z + params["M"].data[question_id] * params["V"].data[kc_id]
    return x, z + params["R"].data[response]


def knowledge_state(x_query, X_hist, Y_hist, params: dict[str, Tensor], config: ModelConfig) -> np.ndarray:
    """Knowledge state for one query given an explicit (already causal) history."""
    X_hist = np.asarray(X_hist, dtype=np.float64).reshape(-1, config.d)
    Y_hist = np.asarray(Y_hist, dtype=np.float64).reshape(-1, config.d)
    t = X_hist.shape[0]
    if t == 0:
        return np.zeros(config.d)
    xs = Tensor(np.vstack([X_hist, np.asarray(x_query)[None, :]])[None])
    ys = Tensor(np.vstack([Y_hist, np.zeros((1, config.d))])[None])
    vis = np.zeros((1, t + 1, t + 1), dtype=bool)
    vis[0, t, :t] = True
    for p in range(t):
        vis[0, p, :p] = True
    model = SimpleKT.__new__(SimpleKT)
    model.config, model.params = config, params
    return model.knowledge_states(xs, ys, vis).data[0, t]


def predict_logit(h, x, params: dict[str, Tensor]) -> float:
    """``w . relu(W2 relu(W1 [h; x] + b1) + b2) + b``."""
    v = np.concatenate([np.asarray(h, dtype=np.float64), np.asarray(x, dtype=np.float64)])
    a = np.maximum(params["W1"].data @ v + params["b1"].data, 0.0)
    a = np.maximum(params["W2"].data @ a + params["b2"].data, 0.0)
    return float(a @ params["w"].data[:, 0] + params["b"].data[0])
