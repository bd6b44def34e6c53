"""Planted-stance retweet corpora with ground truth, and the adjusted Rand index."""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .compose import derive_seed
from .errors import ConfigError
from .ingest import RetweetEvent, to_epoch, write_events

log = logging.getLogger(__name__)

NOISE = -1


def _default_samples():
    return [
        {"sample_id": "covid", "start": "2022-01-03", "end": "2022-01-31"},
        {"sample_id": "ukraine", "start": "2022-03-07", "end": "2022-04-04"},
        {"sample_id": "midterm", "start": "2022-10-03", "end": "2022-10-31"},
    ]


@dataclass
class PlantedConfig:
    seed: int = 0
    n_users: int = 2000
    n_influencers_per_sample: int = 60
    samples: list = field(default_factory=_default_samples)
    k_stances: int = 2
    stance_mixture: list | None = None
    in_affinity: float = 0.3
    out_affinity: float = 0.005
    # optional explicit per-sample (k_stances x n_blocks) affinity matrices, keyed by sample id
    affinity: dict | None = None
    cross_sample_participation: float = 0.6
    events_per_active_user: float = 20.0
    activity_sigma: float = 1.0
    stance_consistency: float = 1.0

    def __post_init__(self):
        if self.stance_mixture is None:
            self.stance_mixture = [1.0 / self.k_stances] * self.k_stances
        mix = np.asarray(self.stance_mixture, dtype=float)
        if mix.size != self.k_stances or abs(mix.sum() - 1) > 1e-9 or (mix < 0).any():
            raise ConfigError("stance_mixture must hold k_stances non-negative weights summing to 1")
        probs = [self.in_affinity, self.out_affinity, self.cross_sample_participation, self.stance_consistency]
        if any(not 0 <= p <= 1 for p in probs):
            raise ConfigError("affinities, participation and consistency must lie in [0, 1]")
        if self.n_users < 1 or self.n_influencers_per_sample < self.k_stances:
            raise ConfigError("need at least one user and one influencer per stance block")
        ids = [s["sample_id"] for s in self.samples]
        if len(set(ids)) != len(ids):
            raise ConfigError("sample ids must be unique")

    @classmethod
    def from_dict(cls, d: dict) -> "PlantedConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown planted config keys: {sorted(unknown)}")
        return cls(**d)

    def affinity_for(self, sample_id: str) -> np.ndarray:
        if self.affinity and sample_id in self.affinity:
            a = np.asarray(self.affinity[sample_id], dtype=float)
            if a.shape[0] != self.k_stances or (a < 0).any() or (a > 1).any():
                raise ConfigError(f"affinity for {sample_id!r} must be k_stances x blocks with entries in [0, 1]")
            return a
        a = np.full((self.k_stances, self.k_stances), self.out_affinity)
        np.fill_diagonal(a, self.in_affinity)
        return a

    def expected_intersection(self) -> float:
        return self.n_users * self.cross_sample_participation ** len(self.samples)


@dataclass
class GroundTruth:
    stances: dict
    sample_stances: dict
    participation: dict
    influencer_blocks: dict
    events_per_user: dict
    distinct_pairs: dict
    block_counts: dict
    expected_intersection: float
    activity_percentile: dict

    def to_json(self) -> dict:
        return asdict(self)


def user_ids(n: int) -> list[str]:
    width = max(5, len(str(n - 1)))
    return [f"u{i:0{width}d}" for i in range(n)]


def generate(cfg: PlantedConfig):
    """Draw a planted multi-sample corpus.

    Returns ``(events_by_sample, ground_truth)``; ``events_by_sample`` maps a
    sample id to its events in generation order.
    """
    if cfg.expected_intersection() < 1:
        log.warning(
            "stage=synth event=sparse_intersection expected_users=%.3f", cfg.expected_intersection()
        )
    users = user_ids(cfg.n_users)
    mix = np.asarray(cfg.stance_mixture, dtype=float)
    base_rng = np.random.default_rng(derive_seed(cfg.seed, "stances"))
    base = base_rng.choice(cfg.k_stances, size=cfg.n_users, p=mix)
    mu = math.log(cfg.events_per_active_user) - cfg.activity_sigma**2 / 2

    events_by_sample, sample_stances, participation, blocks_out = {}, {}, {}, {}
    per_user, pairs, block_counts = {}, {}, {}
    activity_total = np.zeros(cfg.n_users)
    for pos, s in enumerate(cfg.samples):
        sid = s["sample_id"]
        start, end = to_epoch(s["start"]), to_epoch(s["end"])
        rng = np.random.default_rng(derive_seed(cfg.seed, "sample", sid))
        aff = cfg.affinity_for(sid)
        n_blocks = aff.shape[1]
        n_inf = cfg.n_influencers_per_sample
        inf_ids = [f"{sid}_i{j:04d}" for j in range(n_inf)]
        inf_block = np.arange(n_inf) * n_blocks // n_inf
        block_size = np.bincount(inf_block, minlength=n_blocks)

        stance = base.copy()
        if pos > 0 and cfg.stance_consistency < 1:
            redraw = rng.random(cfg.n_users) >= cfg.stance_consistency
            stance[redraw] = rng.choice(cfg.k_stances, size=int(redraw.sum()), p=mix)
        active = rng.random(cfg.n_users) < cfg.cross_sample_participation
        n_events = np.maximum(1, np.rint(rng.lognormal(mu, cfg.activity_sigma, cfg.n_users))).astype(int)
        n_events[~active] = 0
        activity_total += n_events

        weights = aff[:, inf_block]
        cum = np.cumsum(weights / weights.sum(axis=1, keepdims=True), axis=1)
        cum[:, -1] = 1.0

        evs = []
        counts = {}
        bc = np.zeros((cfg.k_stances, n_blocks), dtype=int)
        seen = set()
        for u in np.flatnonzero(active):
            picks = np.searchsorted(cum[stance[u]], rng.random(n_events[u]), side="right")
            ts = rng.integers(start, end, size=n_events[u])
            for j, t in zip(picks, ts):
                evs.append(RetweetEvent(users[u], inf_ids[j], int(t), sid))
                seen.add((u, j))
            np.add.at(bc[stance[u]], inf_block[picks], 1)
            counts[users[u]] = int(n_events[u])
        events_by_sample[sid] = evs
        sample_stances[sid] = {users[u]: int(stance[u]) for u in range(cfg.n_users)}
        participation[sid] = [users[u] for u in np.flatnonzero(active)]
        blocks_out[sid] = {inf_ids[j]: int(inf_block[j]) for j in range(n_inf)}
        per_user[sid] = counts
        pairs[sid] = len(seen)
        block_counts[sid] = {
            "observed": bc.tolist(),
            "block_sizes": block_size.tolist(),
            "affinity": aff.tolist(),
        }

    ranks = activity_total.argsort(kind="stable").argsort(kind="stable")
    pct = {users[u]: float(100.0 * ranks[u] / max(1, cfg.n_users - 1)) for u in range(cfg.n_users)}
    truth = GroundTruth(
        stances={users[u]: int(base[u]) for u in range(cfg.n_users)},
        sample_stances=sample_stances,
        participation=participation,
        influencer_blocks=blocks_out,
        events_per_user=per_user,
        distinct_pairs=pairs,
        block_counts=block_counts,
        expected_intersection=cfg.expected_intersection(),
        activity_percentile=pct,
    )
    return events_by_sample, truth


def write_corpus(cfg: PlantedConfig, out_dir) -> dict:
    """Generate and write ``<sample>.jsonl``, ``ground_truth.json`` and a ready-to-run ``run_config.json``."""
    os.makedirs(out_dir, exist_ok=True)
    events, truth = generate(cfg)
    paths = {}
    for sid, evs in events.items():
        p = os.path.join(out_dir, f"{sid}.jsonl")
        write_events(evs, p)
        paths[sid] = p
    with open(os.path.join(out_dir, "ground_truth.json"), "w", encoding="utf-8") as fh:
        json.dump(truth.to_json(), fh, sort_keys=True)
    with open(os.path.join(out_dir, "planted_config.json"), "w", encoding="utf-8") as fh:
        json.dump(asdict(cfg), fh, indent=2, sort_keys=True)
    run_cfg = {
        "seed": cfg.seed,
        "samples": [
            {"sample_id": s["sample_id"], "start": s["start"], "end": s["end"], "paths": [f"{s['sample_id']}.jsonl"], "format": "jsonl"}
            for s in cfg.samples
        ],
    }
    with open(os.path.join(out_dir, "run_config.json"), "w", encoding="utf-8") as fh:
        json.dump(run_cfg, fh, indent=2, sort_keys=True)
    return paths


def _comb2(x):
    x = np.asarray(x, dtype=np.float64)
    return x * (x - 1) / 2


def adjusted_rand_index(a, b, exclude_noise: bool = False) -> float:
    """Adjusted Rand index from the pair-counting contingency table.

    When the index is undefined (expected index equals its maximum, e.g. both
    labelings a single class) the result is 1.0 for identical partitions and
    0.0 otherwise. ``exclude_noise`` drops points labelled ``-1`` in either input.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError("labelings must cover the same points")
    if exclude_noise:
        keep = (a != NOISE) & (b != NOISE)
        a, b = a[keep], b[keep]
    n = a.size
    if n == 0:
        return 1.0
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)
    index = _comb2(table).sum()
    sa = _comb2(table.sum(axis=1)).sum()
    sb = _comb2(table.sum(axis=0)).sum()
    expected = sa * sb / _comb2(n) if n > 1 else 0.0
    max_index = (sa + sb) / 2
    if max_index == expected:
        same = table.shape[0] == table.shape[1] and np.count_nonzero(table) == table.shape[0]
        return 1.0 if same else 0.0
    return float((index - expected) / (max_index - expected))


def standardized_mean_difference(x, groups) -> float:
    """|mean(g0) - mean(g1)| / pooled sd for a two-group labelling."""
    x = np.asarray(x, dtype=float)
    g = np.asarray(groups)
    labels = np.unique(g)
    if labels.size != 2:
        raise ValueError("need exactly two groups")
    x0, x1 = x[g == labels[0]], x[g == labels[1]]
    n0, n1 = x0.size, x1.size
    pooled = math.sqrt(((n0 - 1) * x0.var(ddof=1) + (n1 - 1) * x1.var(ddof=1)) / (n0 + n1 - 2))
    return abs(x0.mean() - x1.mean()) / pooled if pooled > 0 else math.inf


