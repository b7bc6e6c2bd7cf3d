"""Cosine-distance retrieval, CMC / mAP scoring and the ablation harness."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .config import Config
from .data import Manifest
from .errors import ConfigError, DataError, NumericInputError, ProtocolError

VARIANTS = {
    "global": ("global",),
    "+local": ("global", "local"),
    "+CAM": ("channel", "global", "local"),
    "+SAM-RPE": ("spatial", "channel", "global", "local"),
}


@dataclass
class EmbeddingRecord:
    vector: np.ndarray
    identity: int
    camera: int
    path: str = ""


@dataclass
class RankingResult:
    order: np.ndarray  # gallery indices, ascending distance, ties by index
    distances: np.ndarray  # distances in ranked order
    matches: np.ndarray  # same identity as the query
    junk: np.ndarray  # excluded by protocol

    @property
    def valid_matches(self) -> np.ndarray:
        """Match flags over the ranking with junk entries removed."""
        return self.matches[~self.junk]

    @property
    def has_match(self) -> bool:
        return bool(self.valid_matches.any())


def cosine_distance(a, b, name: str = "") -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise NumericInputError(f"zero-norm embedding{' ' + name if name else ''}: cosine distance undefined")
    return float(1.0 - a @ b / (na * nb))


def cosine_distance_matrix(q: np.ndarray, g: np.ndarray) -> np.ndarray:
    q, g = np.atleast_2d(q), np.atleast_2d(g)
    nq, ng = np.linalg.norm(q, axis=1), np.linalg.norm(g, axis=1)
    if (nq == 0).any() or (ng == 0).any():
        which = "query" if (nq == 0).any() else "gallery"
        idx = int(np.flatnonzero(nq == 0)[0] if which == "query" else np.flatnonzero(ng == 0)[0])
        raise NumericInputError(f"zero-norm {which} embedding at index {idx}")
    return 1.0 - (q / nq[:, None]) @ (g / ng[:, None]).T


def rank_distances(dist, q_ids, q_cams, g_ids, g_cams, camera_filter: bool) -> List[RankingResult]:
    """Rank each query row of ``dist``; optionally junk same-identity same-camera entries."""
    dist = np.asarray(dist, dtype=np.float64)
    q_ids, q_cams = np.asarray(q_ids), np.asarray(q_cams)
    g_ids, g_cams = np.asarray(g_ids), np.asarray(g_cams)
    if dist.shape[1] == 0:
        raise DataError("gallery is empty")
    results = []
    for i in range(dist.shape[0]):
        order = np.argsort(dist[i], kind="stable")
        matches = g_ids[order] == q_ids[i]
        if camera_filter:
            junk = matches & (g_cams[order] == q_cams[i])
        else:
            junk = np.zeros(len(order), dtype=bool)
        results.append(RankingResult(order, dist[i, order], matches, junk))
    if results and not any(r.has_match for r in results):
        raise ProtocolError(
            "no query has a valid match"
            + (" after camera filtering; disable the camera filter for single-camera data" if camera_filter else "")
        )
    return results


def rank_all(queries: Sequence[EmbeddingRecord], gallery: Sequence[EmbeddingRecord],
             camera_filter: Optional[bool] = None) -> List[RankingResult]:
    if not gallery:
        raise DataError("gallery is empty")
    if camera_filter is None:
        camera_filter = default_camera_filter(queries, gallery)
    q = np.stack([r.vector for r in queries])
    g = np.stack([r.vector for r in gallery])
    dist = cosine_distance_matrix(q, g)
    return rank_distances(
        dist,
        [r.identity for r in queries], [r.camera for r in queries],
        [r.identity for r in gallery], [r.camera for r in gallery],
        camera_filter,
    )


def default_camera_filter(queries, gallery) -> bool:
    return len({r.camera for r in queries} | {r.camera for r in gallery}) > 1


def cmc_at_k(rankings: Sequence[RankingResult], k: int) -> float:
    """Fraction of valid queries with a correct identity among the top ``k`` non-junk entries."""
    valid = [r for r in rankings if r.has_match]
    if not valid:
        return float("nan")
    hits = sum(bool(r.valid_matches[:k].any()) for r in valid)
    return hits / len(valid)


def average_precision(relevance) -> float:
    rel = np.asarray(relevance, dtype=bool)
    n_rel = int(rel.sum())
    if n_rel == 0:
        return float("nan")
    positions = np.flatnonzero(rel) + 1
    return math.fsum((k + 1) / pos for k, pos in enumerate(positions)) / n_rel


def mean_ap(rankings: Sequence[RankingResult]) -> float:
    aps = [average_precision(r.valid_matches) for r in rankings if r.has_match]
    return math.fsum(aps) / len(aps) if aps else float("nan")


def evaluate(queries, gallery, camera_filter: Optional[bool] = None, ranks=(1, 5, 10)) -> Dict[str, float]:
    rankings = rank_all(queries, gallery, camera_filter)
    report = {f"rank{k}": cmc_at_k(rankings, k) for k in ranks}
    report["mAP"] = mean_ap(rankings)
    n_valid = sum(r.has_match for r in rankings)
    report["n_queries"] = n_valid
    report["n_dropped"] = len(rankings) - n_valid
    return report


def evaluate_repeated(records: Sequence[EmbeddingRecord], repeats: int, seed: int = 0,
                      camera_filter: Optional[bool] = None, ranks=(1, 5, 10)) -> Dict[str, float]:
    """Average metrics over random re-splits: one gallery image per identity, the rest queries."""
    by_id: Dict[int, List[int]] = {}
    for i, r in enumerate(records):
        by_id.setdefault(r.identity, []).append(i)
    rng = np.random.default_rng(seed)
    reports = []
    for _ in range(repeats):
        gallery_idx = {int(rng.choice(idx)) for _, idx in sorted(by_id.items())}
        gallery = [records[i] for i in sorted(gallery_idx)]
        queries = [r for i, r in enumerate(records) if i not in gallery_idx]
        reports.append(evaluate(queries, gallery, camera_filter, ranks))
    return {k: float(np.mean([rep[k] for rep in reports])) for k in reports[0]}


# embedding files


def records_from_manifest(manifest: Manifest, split: str, vectors: np.ndarray) -> List[EmbeddingRecord]:
    rows = manifest.split(split)
    return [EmbeddingRecord(v, s.identity, s.camera, s.path) for s, v in zip(rows, vectors)]


def write_embeddings(path, records: Sequence[EmbeddingRecord]) -> None:
    lines = []
    for r in records:
        lines.append("\t".join([r.path, str(r.identity), str(r.camera)] + [repr(float(x)) for x in r.vector]))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_embeddings(path) -> List[EmbeddingRecord]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataError(f"cannot read embeddings {path}: {exc}") from exc
    records = []
    dim = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        try:
            vec = np.array([float(x) for x in parts[3:]])
            rec = EmbeddingRecord(vec, int(parts[1]), int(parts[2]), parts[0])
        except (ValueError, IndexError) as exc:
            raise DataError(f"{path}:{lineno}: malformed embedding row ({exc})") from exc
        if dim is None:
            dim = len(vec)
        if len(vec) != dim or dim == 0 or not np.all(np.isfinite(vec)):
            raise DataError(f"{path}:{lineno}: embedding must be finite with uniform dimension {dim}")
        records.append(rec)
    return records


# ablation


@dataclass
class AblationRow:
    variant: str
    n_heads: int
    rank1: float
    mAP: float
    seeds: tuple


def ablate(manifest: Manifest, cfg: Config, variants: Sequence[str] = tuple(VARIANTS),
           seeds: Sequence[int] = (0,), epochs: Optional[int] = None) -> List[AblationRow]:
    """Train and evaluate each cumulative variant; metrics are averaged over ``seeds``.

    Variants remove branches structurally. The same seeds drive every
    variant so rows differ only in architecture.
    """
    from .model import LAGANet
    from .training import Trainer, model_config_for

    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise ConfigError(f"unknown ablation variants {unknown}; choose from {list(VARIANTS)}")
    train_rows = manifest.split("train")
    images = manifest.load_images("train")
    labels = np.array([s.identity for s in train_rows])
    q_img, g_img = manifest.load_images("query"), manifest.load_images("gallery")
    rows = []
    for variant in variants:
        r1, maps, n_heads = [], [], 0
        for seed in seeds:
            mcfg = replace(model_config_for(manifest, cfg.model), branches=VARIANTS[variant], seed=seed)
            model = LAGANet(mcfg)
            n_heads = len(model.head)
            trainer = Trainer(model, cfg.loss, replace(cfg.train, seed=seed), cfg.aug)
            trainer.fit(images, labels, epochs=epochs)
            report = evaluate_model(model, manifest, q_img, g_img, cfg)
            r1.append(report["rank1"])
            maps.append(report["mAP"])
        rows.append(AblationRow(variant, n_heads, float(np.mean(r1)), float(np.mean(maps)), tuple(seeds)))
    return rows


def embed_images(model, images: np.ndarray, cfg: Config) -> np.ndarray:
    from .augment import augment

    size = (model.cfg.input_height, model.cfg.input_width)
    prepped = np.stack([augment(img, cfg.aug, size, None, "eval") for img in images])
    return model.embed(prepped, flip=cfg.eval.flip_average)


def evaluate_model(model, manifest: Manifest, q_img=None, g_img=None, cfg: Optional[Config] = None):
    cfg = cfg or Config()
    q_img = manifest.load_images("query") if q_img is None else q_img
    g_img = manifest.load_images("gallery") if g_img is None else g_img
    queries = records_from_manifest(manifest, "query", embed_images(model, q_img, cfg))
    gallery = records_from_manifest(manifest, "gallery", embed_images(model, g_img, cfg))
    return evaluate(queries, gallery, cfg.eval.camera_filter, cfg.eval.ranks)


def format_table(rows: Sequence[AblationRow]) -> str:
    lines = [f"{'Method':<10} {'heads':>5} {'rank-1':>8} {'mAP':>8}"]
    for r in rows:
        lines.append(f"{r.variant:<10} {r.n_heads:>5} {100 * r.rank1:>8.2f} {100 * r.mAP:>8.2f}")
    return "\n".join(lines)
