"""The mixture-of-experts similarity VAE network.

A shared encoder maps inputs to deterministic latent codes, a gating network
turns codes into cluster probabilities, and each sample is decoded by the
single expert its argmax probability selects. Cluster means are bookkept as
EM-style statistics outside the gradient path and define the Gaussian
components used for generation.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig
from .errors import ConfigError, DimensionError, ParameterError, RoutingError


@dataclass
class ForwardOutput:
    z: Tensor
    P: Tensor
    P_noisy: Tensor
    assignments: np.ndarray
    x_reconst: Tensor


def gate(P) -> np.ndarray:
    """Hard expert assignment; ties go to the lowest index."""
    p = P.data if isinstance(P, Tensor) else np.asarray(P)
    return np.argmax(p, axis=1).astype(np.int64)


def cluster_means(P, z, previous: Optional[np.ndarray] = None) -> np.ndarray:
    """EM-style centroids: mu_k = sum_i p_ik z_i / N_k.

    ``N_k`` counts the samples whose argmax is ``k``, so the result is not a
    convex combination. Clusters with ``N_k = 0`` keep their ``previous`` row
    (zeros when no previous means are given).
    """
    p = np.asarray(P.data if isinstance(P, Tensor) else P, dtype=np.float64)
    zz = np.asarray(z.data if isinstance(z, Tensor) else z, dtype=np.float64)
    k = p.shape[1]
    counts = np.bincount(gate(p), minlength=k)
    weighted = p.T @ zz
    out = np.zeros((k, zz.shape[1])) if previous is None else np.array(previous, dtype=np.float64)
    filled = counts > 0
    out[filled] = weighted[filled] / counts[filled, None]
    return out


def _mlp(x: Tensor, params: dict[str, Tensor], prefix: str, n_layers: int,
         dropout_rate: float = 0.0, rng: Optional[np.random.Generator] = None) -> Tensor:
    """relu hidden layers, linear output; optional dropout after each hidden layer."""
    h = x
    for i in range(n_layers):
        h = ad.linear(h, params[f"{prefix}.{i}.weight"], params[f"{prefix}.{i}.bias"])
        if i < n_layers - 1:
            h = ad.relu(h)
            if dropout_rate > 0.0:
                h = ad.dropout(h, dropout_rate, training=True, rng=rng)
    return h


class MoESimVAE:
    """Encoder, gating network and K independent expert decoders."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=None):
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype or ad.default_dtype())
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        c = config
        self._add_mlp(rng, "encoder", [c.input_dim, *c.encoder_hidden, c.latent_dim])
        self._add_mlp(rng, "cluster", [c.latent_dim, *c.clustering_hidden, c.num_experts])
        for k in range(c.num_experts):
            self._add_mlp(rng, f"expert.{k}", [c.latent_dim, *c.expert_hidden, c.input_dim])
        self.cluster_means = rng.standard_normal((c.num_experts, c.latent_dim)).astype(self.dtype)
        self.empty_batches = np.zeros(c.num_experts, dtype=np.int64)
        self.decoder_calls = 0

    def _add_mlp(self, rng, prefix, widths):
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            b = rng.uniform(-bound, bound, size=fan_out)
            self.params[f"{prefix}.{i}.weight"] = Tensor(w, requires_grad=True, name=f"{prefix}.{i}.weight",
                                                         dtype=self.dtype)
            self.params[f"{prefix}.{i}.bias"] = Tensor(b, requires_grad=True, name=f"{prefix}.{i}.bias",
                                                       dtype=self.dtype)

    @property
    def num_experts(self) -> int:
        return self.config.num_experts

    def expert_params(self, k: int) -> dict[str, Tensor]:
        prefix = f"expert.{k}."
        return {n: p for n, p in self.params.items() if n.startswith(prefix)}

    # -- network pieces -------------------------------------------------------

    def encode(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x, dtype=self.dtype)
        if x.ndim != 2 or x.shape[1] != self.config.input_dim:
            raise DimensionError(f"expected inputs of width {self.config.input_dim}, got shape {x.shape}")
        return _mlp(x, self.params, "encoder", len(self.config.encoder_hidden) + 1)

    def cluster_probs(self, z, noisy: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        z = z if isinstance(z, Tensor) else Tensor(z, dtype=self.dtype)
        if z.ndim != 2 or z.shape[1] != self.config.latent_dim:
            raise DimensionError(f"expected latent codes of width {self.config.latent_dim}, got {z.shape}")
        rate = self.config.depict_dropout_rate if noisy else 0.0
        logits = _mlp(z, self.params, "cluster", len(self.config.clustering_hidden) + 1,
                      dropout_rate=rate, rng=rng)
        return ad.softmax(logits, axis=-1)

    def expert(self, k: int, z: Tensor) -> Tensor:
        self.decoder_calls += z.shape[0]
        out = _mlp(z, self.params, f"expert.{k}", len(self.config.expert_hidden) + 1)
        return ad.sigmoid(out)

    def decode(self, z, assignments, P: Optional[Tensor] = None) -> Tensor:
        """Route each latent code to its assigned expert.

        With ``config.soft_routing`` every expert decodes every sample and the
        outputs are mixed by ``P`` (which must then be given); gradients then
        reach the gating network through the mixture weights.
        """
        z = z if isinstance(z, Tensor) else Tensor(z, dtype=self.dtype)
        assignments = np.asarray(assignments)
        n = z.shape[0]
        K = self.num_experts
        if assignments.shape != (n,):
            raise RoutingError(f"expected {n} assignments, got shape {assignments.shape}")
        if n and (assignments.min() < 0 or assignments.max() >= K):
            raise RoutingError(f"assignments must lie in [0, {K}), got range "
                               f"[{assignments.min()}, {assignments.max()}]")
        if self.config.soft_routing:
            if P is None:
                raise RoutingError("soft routing needs the probability matrix P")
            out = None
            for k in range(K):
                weight = ad.take_rows(ad.transpose(P), [k])  # 1 x N
                term = self.expert(k, z) * ad.transpose(weight)
                out = term if out is None else out + term
            return out
        parts, indices = [], []
        for k in range(K):
            idx = np.flatnonzero(assignments == k)
            if len(idx) == 0:
                continue
            parts.append(self.expert(k, ad.take_rows(z, idx)))
            indices.append(idx)
        if not parts:
            return Tensor(np.zeros((0, self.config.input_dim)), dtype=self.dtype)
        return ad.scatter_rows(parts, indices, n)

    def forward(self, x, training: bool = False, rng: Optional[np.random.Generator] = None) -> ForwardOutput:
        z = self.encode(x)
        P = self.cluster_probs(z)
        P_noisy = self.cluster_probs(z, noisy=True, rng=rng) if training else P
        assignments = gate(P)
        x_reconst = self.decode(z, assignments, P=P)
        return ForwardOutput(z=z, P=P, P_noisy=P_noisy, assignments=assignments, x_reconst=x_reconst)

    # -- statistics -------------------------------------------------------------

    def update_cluster_means(self, P, z) -> None:
        """One EM-style mean update from a batch of probabilities and codes.

        A cluster left empty for ``empty_cluster_patience`` consecutive
        updates is re-seeded at the code of the least confident sample.
        """
        p = np.asarray(P.data if isinstance(P, Tensor) else P)
        zz = np.asarray(z.data if isinstance(z, Tensor) else z)
        counts = np.bincount(gate(p), minlength=self.num_experts)
        means = cluster_means(p, zz, previous=self.cluster_means)
        self.empty_batches = np.where(counts == 0, self.empty_batches + 1, 0)
        stale = np.flatnonzero(self.empty_batches >= self.config.empty_cluster_patience)
        if len(stale) and len(p):
            order = np.argsort(p.max(axis=1), kind="stable")
            for j, k in enumerate(stale):
                means[k] = zz[order[j % len(order)]]
                self.empty_batches[k] = 0
        self.cluster_means = means.astype(self.dtype)

    # -- inference ------------------------------------------------------------------

    def predict(self, x, batch_size: int = 1024) -> tuple[np.ndarray, np.ndarray]:
        """Latent codes and clean probabilities for ``x``, without recording."""
        x = np.asarray(x)
        zs, ps = [], []
        for start in range(0, len(x), batch_size):
            z = self.encode(x[start:start + batch_size])
            zs.append(z.data)
            ps.append(self.cluster_probs(z).data)
        if not zs:
            return (np.zeros((0, self.config.latent_dim), self.dtype),
                    np.zeros((0, self.num_experts), self.dtype))
        return np.concatenate(zs), np.concatenate(ps)

    def generate(self, k: int, n: int, seed=None) -> np.ndarray:
        """Decode ``n`` draws from N(mu_k, I) through expert ``k``; no rejection."""
        K = self.num_experts
        if not isinstance(k, (int, np.integer)) or not 0 <= k < K:
            raise ParameterError(f"cluster index must lie in [0, {K}), got {k!r}")
        if n < 0:
            raise ParameterError(f"sample count must be non-negative, got {n}")
        if n == 0:
            return np.zeros((0, self.config.input_dim), dtype=self.dtype)
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        z = self.cluster_means[k] + rng.standard_normal((n, self.config.latent_dim))
        return self.expert(int(k), Tensor(z, dtype=self.dtype)).data

    def sample(self, n: int, seed=None) -> tuple[np.ndarray, np.ndarray]:
        """Draw from the full mixture with uniform component weights."""
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        comps = rng.integers(0, self.num_experts, size=n)
        out = np.zeros((n, self.config.input_dim), dtype=self.dtype)
        for k in range(self.num_experts):
            idx = np.flatnonzero(comps == k)
            if len(idx):
                out[idx] = self.generate(k, len(idx), seed=rng)
        return out, comps

    # -- persistence helpers --------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {name: p.data for name, p in self.params.items()}
        out["cluster_means"] = self.cluster_means
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        expected = {name: p.shape for name, p in self.params.items()}
        expected["cluster_means"] = self.cluster_means.shape
        for name, shape in expected.items():
            if name not in arrays:
                raise ConfigError(f"checkpoint is missing tensor {name!r}")
            if tuple(arrays[name].shape) != tuple(shape):
                raise ConfigError(f"tensor {name!r} has shape {tuple(arrays[name].shape)}, "
                                  f"model expects {tuple(shape)}")
        for name, p in self.params.items():
            p.data = np.array(arrays[name], dtype=self.dtype)
        self.cluster_means = np.array(arrays["cluster_means"], dtype=self.dtype)
