"""Rejection sampling of latent vectors around a bundle's encoded seeds.

The target is a Gaussian-kernel Parzen density over the seed latents; the
proposal is a diagonal Gaussian fitted to the same seeds. Random streams are
derived from one master seed with :class:`numpy.random.SeedSequence` spawn
keys ``(bundle, 0)`` for envelope probes and ``(bundle, 1, i, 0)`` /
``(bundle, 1, i, 1)`` for the proposal and uniform draws of candidate ``i``,
so a candidate's fate depends neither on evaluation order nor on block size.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import EnvelopeFailureError, InsufficientSeedsError, SamplerStalledError

log = logging.getLogger(__name__)

_LOG_2PI = math.log(2 * math.pi)


@dataclass
class SamplerConfig:
    n_samples: int = 2000
    bandwidth_factor: float = 1.0
    bandwidth_mode: str = "absolute"
    proposal_inflation: float = 1.5
    safety_margin: float = 1.2
    probe_draws: int = 10000
    max_attempts: int = 10000
    seed: int = 0

    def __post_init__(self):
        problems = [
            f"{k} must be positive"
            for k in (
                "n_samples",
                "bandwidth_factor",
                "proposal_inflation",
                "safety_margin",
                "probe_draws",
                "max_attempts",
            )
            if not getattr(self, k) > 0
        ]
        if self.bandwidth_mode not in ("absolute", "silverman"):
            problems.append("bandwidth_mode must be 'absolute' or 'silverman'")
        if problems:
            raise ValueError("; ".join(problems))

    def to_dict(self):
        return asdict(self)


# Defaults for generation runs. An absolute kernel of 1.0 latent unit is far
# below the within-bundle latent spread of the trained autoencoder, which puts
# the envelope constant near exp(40); a multiple of Silverman's rule keeps k
# near 1e3 for every bundle.
GENERATION_DEFAULTS = {"bandwidth_factor": 7.0, "bandwidth_mode": "silverman"}


def generation_config(**overrides) -> SamplerConfig:
    """Sampler config for generation runs: :data:`GENERATION_DEFAULTS` plus overrides."""
    return SamplerConfig(**{**GENERATION_DEFAULTS, **overrides})


def silverman_bandwidth(latents: np.ndarray) -> float:
    m, d = latents.shape
    sigma = float(np.mean(np.std(latents, axis=0, ddof=1)))
    return sigma * (4.0 / (d + 2)) ** (1.0 / (d + 4)) * m ** (-1.0 / (d + 4))


@dataclass(frozen=True)
class ParzenDensity:
    """Equal-weight isotropic Gaussian mixture centred on the seed latents."""

    latents: np.ndarray
    bandwidth: float

    @property
    def dim(self) -> int:
        return self.latents.shape[1]

    def log_pdf(self, z, chunk: int = 4096) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        m, d = self.latents.shape
        h2 = self.bandwidth**2
        const = -0.5 * d * (_LOG_2PI + math.log(h2)) - math.log(m)
        zi2 = np.einsum("ij,ij->i", self.latents, self.latents)
        out = np.empty(len(z))
        for lo in range(0, len(z), chunk):
            zc = z[lo : lo + chunk]
            sq = np.einsum("ij,ij->i", zc, zc)[:, None] + zi2[None, :] - 2.0 * zc @ self.latents.T
            np.maximum(sq, 0.0, out=sq)
            out[lo : lo + chunk] = logsumexp(-0.5 * sq / h2, axis=1) + const
        return out

    def pdf(self, z) -> np.ndarray:
        return np.exp(self.log_pdf(z))


@dataclass(frozen=True)
class GaussianProposal:
    mean: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        if not (np.all(np.isfinite(self.variance)) and np.all(self.variance > 0)):
            raise ValueError("proposal variances must be positive and finite")

    def log_pdf(self, z) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        r = (z - self.mean) ** 2 / self.variance
        return -0.5 * (r.sum(axis=1) + np.sum(np.log(self.variance)) + len(self.mean) * _LOG_2PI)

    def pdf(self, z) -> np.ndarray:
        return np.exp(self.log_pdf(z))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.mean + np.sqrt(self.variance) * rng.standard_normal((n, len(self.mean)))


def _check_seeds(latents) -> np.ndarray:
    z = np.asarray(latents, dtype=np.float64)
    if z.ndim != 2 or len(z) < 2:
        raise InsufficientSeedsError(
            f"need at least 2 seed latents to estimate a density, got {len(z) if z.ndim == 2 else z.ndim}"
        )
    if not np.all(np.isfinite(z)):
        raise ValueError("seed latents must be finite")
    return z


def fit_parzen(latents, bandwidth_factor: float = 1.0, mode: str = "absolute") -> ParzenDensity:
    """Kernel density over seed latents.

    In ``absolute`` mode the kernel standard deviation equals
    ``bandwidth_factor``; in ``silverman`` mode it scales Silverman's rule.
    """
    z = _check_seeds(latents)
    if mode == "absolute":
        h = float(bandwidth_factor)
    elif mode == "silverman":
        h = float(bandwidth_factor) * silverman_bandwidth(z)
    else:
        raise ValueError(f"unknown bandwidth mode {mode!r}")
    if not h > 0:
        raise ValueError("bandwidth must be positive")
    return ParzenDensity(z.copy(), h)


def fit_proposal(latents, inflation: float = 1.5, bandwidth: float = 0.0) -> GaussianProposal:
    """Diagonal Gaussian: seed mean, variance ``inflation * (var + h**2)``."""
    z = _check_seeds(latents)
    var = inflation * (np.var(z, axis=0, ddof=1) + bandwidth**2)
    return GaussianProposal(z.mean(axis=0), np.maximum(var, 1e-6))


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def estimate_log_k(p: ParzenDensity, q: GaussianProposal, cfg: SamplerConfig, bundle_key: int = 0) -> float:
    """Log of ``safety_margin * max p/q`` over the seeds and proposal probes."""
    probes = q.sample(cfg.probe_draws, _stream(cfg.seed, bundle_key, 0))
    pts = np.vstack([p.latents, probes])
    log_ratio = p.log_pdf(pts) - q.log_pdf(pts)
    peak = float(np.max(log_ratio))
    if not math.isfinite(peak):
        raise EnvelopeFailureError(
            "p/q ratio is not finite; increase proposal_inflation"
        )
    return peak + math.log(cfg.safety_margin)


def estimate_k(p: ParzenDensity, q: GaussianProposal, cfg: SamplerConfig, bundle_key: int = 0) -> float:
    log_k = estimate_log_k(p, q, cfg, bundle_key)
    k = math.exp(log_k) if log_k < 709.0 else math.inf
    if not math.isfinite(k):
        raise EnvelopeFailureError(
            f"envelope constant overflows (log k = {log_k:.1f}); increase proposal_inflation"
        )
    return k


def _draw_round(p, q, log_k, gens, rows, block, attempts, max_attempts, accepted, done):
    """One block of proposals for each candidate in ``rows``; updates state in place."""
    d = len(q.mean)
    draws = [(gens[i][0].standard_normal((block, d)), gens[i][1].random(block)) for i in rows]
    z = q.mean + np.sqrt(q.variance) * np.stack([g[0] for g in draws])
    u = np.stack([g[1] for g in draws])
    flat = z.reshape(-1, d)
    log_q = q.log_pdf(flat).reshape(len(rows), block)
    log_p = p.log_pdf(flat).reshape(len(rows), block)
    # u0 <= p(z0) with u0 = u * k q(z0)
    with np.errstate(divide="ignore"):
        accept = np.log(u) + log_k + log_q <= log_p
    budget = max_attempts - attempts[rows]
    accept &= np.arange(block)[None, :] < budget[:, None]
    has = accept.any(axis=1)
    used = np.where(has, np.argmax(accept, axis=1) + 1, np.minimum(block, budget))
    considered = np.arange(block)[None, :] < used[:, None]
    violations = int(np.sum((log_p > log_k + log_q) & considered))
    attempts[rows] += used
    hit = rows[has]
    accepted[hit] = z[has, used[has] - 1]
    done[hit] = True
    return violations, int(used.sum())


def rejection_sample(p: ParzenDensity, q: GaussianProposal, k: float, n: int, seed: int = 0,
                     bundle_key: int = 0, max_attempts: int = 10000, block: int | None = None,
                     max_rows: int = 200000):
    """Draw ``n`` latents from ``p`` using proposal ``q`` and envelope ``k * q``.

    Candidate ``i`` draws ``z0 ~ q`` and ``u0 ~ U[0, k q(z0)]`` from its own
    stream until ``u0 <= p(z0)``. Returns ``(latents, diagnostics)``; raises
    :class:`SamplerStalledError` (carrying the successful draws) when any
    candidate exhausts ``max_attempts``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    log_k = math.log(k)
    if block is None:
        block = int(min(max_attempts, max(16, math.ceil(k / 2))))
    d = len(q.mean)
    gens = [(_stream(seed, bundle_key, 1, i, 0), _stream(seed, bundle_key, 1, i, 1)) for i in range(n)]
    attempts = np.zeros(n, dtype=np.int64)
    accepted = np.full((n, d), np.nan)
    done = np.zeros(n, dtype=bool)
    violations = 0
    pending = np.arange(n)
    group = max(1, max_rows // block)
    while len(pending):
        still = []
        for lo in range(0, len(pending), group):
            rows = pending[lo : lo + group]
            v, _ = _draw_round(p, q, log_k, gens, rows, block, attempts, max_attempts, accepted, done)
            violations += v
            still.append(rows[~done[rows] & (attempts[rows] < max_attempts)])
        pending = np.concatenate(still)

    total = int(attempts.sum())
    diagnostics = {
        "n_requested": int(n),
        "n_accepted": int(done.sum()),
        "attempts": total,
        "k": float(k),
        "acceptance_rate": float(done.sum() / total) if total else 0.0,
        "bandwidth": float(p.bandwidth),
        "envelope_violations": int(violations),
    }
    if violations:
        log.warning("%d envelope violations (p > k q) observed", violations)
    if not done.all():
        raise SamplerStalledError(
            f"{int((~done).sum())} candidate(s) exceeded {max_attempts} attempts",
            accepted[done],
            diagnostics,
        )
    return accepted, diagnostics


def sample_latents(latents, cfg: SamplerConfig, bundle_key: int = 0):
    """Fit density, proposal and envelope to seed latents, then sample."""
    p = fit_parzen(latents, cfg.bandwidth_factor, cfg.bandwidth_mode)
    q = fit_proposal(p.latents, cfg.proposal_inflation, p.bandwidth)
    k = estimate_k(p, q, cfg, bundle_key)
    return rejection_sample(
        p, q, k, cfg.n_samples, cfg.seed, bundle_key, cfg.max_attempts
    )


def sample_bundle(model, seeds, cfg: SamplerConfig):
    """Generate ``cfg.n_samples`` candidate streamlines for every seed bundle.

    Returns ``(candidates, diagnostics)``. A bundle that cannot be sampled is
    reported in the diagnostics and does not affect the others; a stalled
    bundle contributes the candidates accepted before the stall.
    """
    from .autoencoder import decode, encode
    from .geometry import Tractogram

    parts, diagnostics = [], []
    for bundle_id in seeds.bundle_ids():
        sub = seeds.bundle(bundle_id)
        entry = {"bundle": int(bundle_id), "n_requested": int(cfg.n_samples), "n_seeds": len(sub)}
        if len(sub) < 2:
            log.warning("bundle %d has %d seed(s); skipped", bundle_id, len(sub))
            diagnostics.append({**entry, "status": "skipped", "n_accepted": 0,
                                "error": "fewer than 2 seeds"})
            continue
        status = "ok"
        try:
            latents, diag = sample_latents(encode(model, sub.streamlines), cfg, int(bundle_id))
        except SamplerStalledError as exc:
            # keep the candidates that were accepted before the budget ran out
            log.warning("bundle %d: %s", bundle_id, exc)
            latents, diag, status = exc.accepted, {**exc.stats, "error": str(exc)}, "stalled"
        except (InsufficientSeedsError, EnvelopeFailureError) as exc:
            log.warning("bundle %d: %s", bundle_id, exc)
            diagnostics.append({**entry, "status": "error", "n_accepted": 0, "error": str(exc)})
            continue
        if len(latents) == 0:
            diagnostics.append({**entry, **diag, "status": status})
            continue
        streamlines = list(decode(model, latents))
        parts.append(
            Tractogram(streamlines, np.full(len(streamlines), bundle_id), seeds.space_tag,
                       dict(seeds.label_names))
        )
        diagnostics.append({**entry, **diag, "status": status})
    if not parts:
        return Tractogram([], np.zeros(0, dtype=np.int64), seeds.space_tag, dict(seeds.label_names)), diagnostics
    return Tractogram.concatenate(parts), diagnostics
