"""Conditional autoregressive answer policy over a 12-token vocabulary.

p(y_t | y_<t, question, latent): the conditioner concatenates the question
features, the mean-pooled latent block, the running mean of prefix token
embeddings (seeded with BOS), and a learned position embedding, then applies
a single-hidden-layer MLP to produce logits.

Sampling uses temperature plus nucleus truncation, but the log-probs stored
for importance ratios always come from the unmodified full-support
temperature-1 distribution. Teacher-forced recomputation mirrors the batched
sampling arithmetic operation for operation; recomputing with the same batch
shape as collection reproduces the stored log-probs bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .nets import ConfigError, MlpSpec, init_mlp_params, mlp_forward
from .tape import Tensor, concat, data_of, log_softmax, no_grad, stack

DIGITS = tuple(range(10))
BOS = 10
EOS = 11
VOCAB_SIZE = 12


@dataclass
class AnswerSample:
    """One sampled answer: emitted tokens (terminal EOS included when it was
    produced), their full-support old log-probs, and the scored reward."""

    tokens: list[int]
    logprobs_old: np.ndarray
    reward: float = 0.0
    entropies: np.ndarray = dc_field(default_factory=lambda: np.zeros(0))
    point: np.ndarray | None = None     # continuous readout channel


@dataclass(frozen=True)
class AnswerPolicy:
    """Categorical answer policy; latent_dim=None drops latent conditioning."""

    cond_dim: int
    latent_dim: int | None
    hidden: tuple[int, ...] = (24,)
    vocab: int = VOCAB_SIZE
    max_len: int = 8
    embed_dim: int = 8

    @property
    def feature_dim(self) -> int:
        return self.cond_dim + (self.latent_dim or 0) + 2 * self.embed_dim

    @property
    def spec(self) -> MlpSpec:
        widths = (self.feature_dim, *self.hidden, self.vocab)
        return MlpSpec(widths, tuple(["tanh"] * len(self.hidden) + ["identity"]))

    @property
    def embed_count(self) -> int:
        return self.vocab * self.embed_dim

    @property
    def pos_count(self) -> int:
        return (self.max_len + 1) * self.embed_dim

    @property
    def param_count(self) -> int:
        return self.embed_count + self.pos_count + self.spec.param_count

    def init_params(self, rng: np.random.Generator, scale: float = 0.5) -> np.ndarray:
        """Random embeddings/hidden weights, zero logits head (uniform policy)."""
        out = np.zeros(self.param_count, dtype=np.float64)
        out[:self.embed_count] = rng.standard_normal(self.embed_count) * 0.3
        out[self.embed_count:self.embed_count + self.pos_count] = \
            rng.standard_normal(self.pos_count) * 0.3
        out[self.embed_count + self.pos_count:] = init_mlp_params(
            self.spec, rng, scale=scale, zero_output=True)
        return out

    def _tables(self, params):
        embed = params[:self.embed_count].reshape((self.vocab, self.embed_dim))
        pos = params[self.embed_count:self.embed_count + self.pos_count].reshape(
            (self.max_len + 1, self.embed_dim))
        mlp_params = params[self.embed_count + self.pos_count:]
        return embed, pos, mlp_params

    def pool_latents(self, latents):
        """Mean over block rows: (n, B, D) -> (n, D); None when latent-free."""
        if self.latent_dim is None:
            return None
        if isinstance(latents, Tensor):
            return latents.mean(axis=1)
        return np.asarray(latents, dtype=np.float64).mean(axis=1)

    def _logits(self, mlp_params, question, pooled, prefix_mean, pos_rows):
        parts = [question]
        if self.latent_dim is not None:
            parts.append(pooled)
        parts.extend([prefix_mean, pos_rows])
        return mlp_forward(self.spec, mlp_params, concat(parts, axis=-1))


def _broadcast_rows(x, batch: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.broadcast_to(x, (batch, x.shape[-1])) if x.ndim == 1 else x


def token_distribution(policy: AnswerPolicy, params, prefix: list[int],
                       question, latent=None) -> np.ndarray:
    """Full-support next-token probabilities after `prefix` (excluding BOS)."""
    if len(prefix) > policy.max_len:
        raise ConfigError("prefix longer than the policy maximum length")
    with no_grad():
        embed, pos, mlp_params = policy._tables(np.asarray(params, dtype=np.float64))
        prefix_sum = embed[np.full(1, BOS)]
        for tok in prefix:
            prefix_sum = prefix_sum + embed[np.full(1, tok)]
        prefix_mean = prefix_sum / float(len(prefix) + 1)
        pooled = None
        if policy.latent_dim is not None:
            pooled = policy.pool_latents(np.asarray(latent, dtype=np.float64)[None])
        position = min(len(prefix), policy.max_len)
        logits = data_of(policy._logits(
            mlp_params, _broadcast_rows(question, 1), pooled, prefix_mean,
            pos[np.full(1, position)]))
        return np.exp(log_softmax(logits, axis=-1))[0]


def _nucleus_filter(probs: np.ndarray, top_p: float) -> tuple[np.ndarray, np.ndarray]:
    """Keep the smallest descending-sorted prefix covering >= top_p mass."""
    order = np.argsort(-probs, axis=-1, kind="stable")
    sorted_p = np.take_along_axis(probs, order, axis=-1)
    csum = np.cumsum(sorted_p, axis=-1)
    keep = (csum - sorted_p) < top_p
    filtered = np.where(keep, sorted_p, 0.0)
    filtered = filtered / filtered.sum(axis=-1, keepdims=True)
    return order, filtered


def sample_answers(policy: AnswerPolicy, params, question, latents,
                   n: int, temperature: float, top_p: float,
                   rng: np.random.Generator, greedy: bool = False
                   ) -> list[AnswerSample]:
    """Sample n answers in lockstep (row i conditioned on latents[i]).

    latents: (n, B, D), or None for latent-free policies. Stored log-probs
    and entropies come from the unmodified temperature-1 full-support policy.
    """
    if temperature <= 0:
        raise ConfigError("temperature must be positive (use greedy=True)")
    if not 0 < top_p <= 1:
        raise ConfigError("top_p must lie in (0, 1]")
    with no_grad():
        params = np.asarray(params, dtype=np.float64)
        embed, pos, mlp_params = policy._tables(params)
        question = _broadcast_rows(question, n)
        pooled = policy.pool_latents(latents) if policy.latent_dim is not None else None
        prefix_sum = embed[np.full(n, BOS)]
        alive = np.ones(n, dtype=bool)
        tokens: list[list[int]] = [[] for _ in range(n)]
        logps: list[list[float]] = [[] for _ in range(n)]
        ents: list[list[float]] = [[] for _ in range(n)]
        for position in range(policy.max_len):
            prefix_mean = prefix_sum / float(position + 1)
            logits = data_of(policy._logits(mlp_params, question, pooled,
                                            prefix_mean, pos[np.full(n, position)]))
            logp_full = log_softmax(logits, axis=-1)
            p_full = np.exp(logp_full)
            entropy = -np.sum(p_full * logp_full, axis=-1)
            if greedy:
                tok = np.argmax(logits, axis=-1)
            else:
                p_temp = np.exp(log_softmax(logits / temperature, axis=-1))
                order, filtered = _nucleus_filter(p_temp, top_p)
                cf = np.cumsum(filtered, axis=-1)
                u = rng.random(n)
                idx = np.minimum((cf < u[:, None]).sum(axis=-1), policy.vocab - 1)
                tok = np.take_along_axis(order, idx[:, None], axis=-1)[:, 0]
            for i in range(n):
                if alive[i]:
                    tokens[i].append(int(tok[i]))
                    logps[i].append(float(logp_full[i, tok[i]]))
                    ents[i].append(float(entropy[i]))
            prefix_sum = prefix_sum + embed[tok] * alive[:, None].astype(np.float64)
            alive = alive & (tok != EOS)
            if not alive.any():
                break
        return [AnswerSample(tokens=tokens[i],
                             logprobs_old=np.array(logps[i]),
                             entropies=np.array(ents[i])) for i in range(n)]


def sample_answer(policy: AnswerPolicy, params, question, latent,
                  temperature: float, top_p: float, rng: np.random.Generator,
                  greedy: bool = False) -> AnswerSample:
    latents = None if policy.latent_dim is None else np.asarray(latent)[None]
    return sample_answers(policy, params, question, latents, 1, temperature,
                          top_p, rng, greedy)[0]


def sequence_logprob_matrix(policy: AnswerPolicy, params, token_lists,
                            question, latents=None):
    """Teacher-forced log-probs for a batch of stored answers.

    Returns (logp, mask): logp is (n, T) — a Tensor when params or latents
    carry gradients — and mask flags real token positions. Matching the
    collection batch shape makes the values bit-equal to the stored ones.
    """
    n = len(token_lists)
    steps = max((len(t) for t in token_lists), default=0)
    lengths = np.array([len(t) for t in token_lists])
    padded = np.full((n, steps), EOS, dtype=int)
    for i, toks in enumerate(token_lists):
        padded[i, :len(toks)] = toks
    embed, pos, mlp_params = policy._tables(params)
    question = _broadcast_rows(question, n)
    pooled = policy.pool_latents(latents) if policy.latent_dim is not None else None
    prefix_sum = embed[np.full(n, BOS)]
    rows = np.arange(n)
    cols = []
    for position in range(steps):
        alive = (lengths > position).astype(np.float64)
        prefix_mean = prefix_sum / float(position + 1)
        logits = policy._logits(mlp_params, question, pooled, prefix_mean,
                                pos[np.full(n, position)])
        logp_full = log_softmax(logits, axis=-1)
        cols.append(logp_full[(rows, padded[:, position])])
        prefix_sum = prefix_sum + embed[padded[:, position]] * alive[:, None]
    logp = stack(cols, axis=1) if cols else np.zeros((n, 0))
    mask = lengths[:, None] > np.arange(steps)[None, :] if steps else \
        np.zeros((n, 0), dtype=bool)
    return logp, mask


def sequence_logprobs(policy: AnswerPolicy, params, tokens: list[int],
                      question, latent=None) -> np.ndarray:
    """Per-token log-probs of one stored answer under the current policy."""
    latents = None if policy.latent_dim is None else np.asarray(latent)[None]
    with no_grad():
        logp, _ = sequence_logprob_matrix(policy, params, [list(tokens)],
                                          question, latents)
    return data_of(logp)[0][:len(tokens)]


def mean_token_entropy(samples: list[AnswerSample]) -> float:
    """Mean full-support next-token entropy across all sampled tokens."""
    vals = [s.entropies for s in samples if s.entropies.size]
    if not vals:
        return 0.0
    return float(np.concatenate(vals).mean())
