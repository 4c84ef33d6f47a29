"""File-based stages behind the CLI: simulate, score, fit, correlate, report."""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .config import ConfigError, StudyConfig
from .correlation import MIN_POLICIES, CorrelationConfig, CorrelationReport, PolicyFamilyTable, correlate, scatter_rows, scatter_svg, write_scatter
from .datamodel import Dataset, load_dataset, save_dataset
from .offline_metrics import DegenerateWeightingError, MetricReport, QceConfig, TreConfig, metric_report, table_catalogue
from .online_scoring import EpisodeLog, EpisodeScoreSet, load_episodes, save_episodes, score_set
from .simworld.policy import bundled_policies, load_policies, save_policies
from .simworld.study import StudySettings, family_table, policy_uncertainty, run_study
from .simworld.track import bundled_tracks, load_tracks
from .textio import dumps, write_csv, write_lines
from .uncertainty import (
    FitDiagnostics,
    UncertaintyEstimate,
    UweConfig,
    base_kernels,
    fit_uwe,
    uwe,
    uwe_components,
)

MANIFEST = "manifest.json"
UWE_NAME = "uwe"


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _ensure_dir(path: Path) -> Path:
    path.mkdir(parents=True, exist_ok=True)
    return path


def study_settings(cfg: StudyConfig) -> StudySettings:
    return StudySettings(
        master_seed=cfg.seed,
        stride=cfg.stride,
        waypoints=cfg.waypoints,
        qce_sigma=cfg.qce_sigma,
        tre_lambda=cfg.tre_lambda,
        uw_gamma=cfg.uw_gamma,
        uncertainty_target=cfg.uncertainty_target,
        ensemble_members=cfg.ensemble_members if cfg.estimator == "ensemble" else 0,
        uncertainty_source=cfg.uncertainty_source,
        penalties=dict(cfg.penalties),
    )


def catalogue(cfg: StudyConfig):
    full = table_catalogue(QceConfig(cfg.qce_sigma), TreConfig(cfg.tre_lambda), cfg.uw_gamma)
    return [m for m in full if m.name in cfg.catalogue]


# -- simulate --------------------------------------------------------------------------


def simulate(cfg: StudyConfig) -> dict:
    """Run the family on the tracks and write every artifact plus a manifest."""
    tracks = load_tracks(cfg.tracks) if cfg.tracks else bundled_tracks()
    family = load_policies(cfg.policies) if cfg.policies else bundled_policies()
    if len(family) < MIN_POLICIES:
        raise ConfigError(f"a study needs at least {MIN_POLICIES} policies, the family has {len(family)}")
    settings = study_settings(cfg)
    result = run_study(family, tracks, settings, jobs=cfg.jobs)

    out = _ensure_dir(Path(cfg.out))
    arts: list[dict] = []

    def record(kind: str, rel: str, **extra):
        arts.append({"kind": kind, "path": rel, **extra, "sha256": _sha256(out / rel)})

    write_lines(out / "tracks.jsonl", [t.to_obj() for t in tracks])
    record("tracks", "tracks.jsonl")
    save_policies(family, out / "policies.jsonl")
    record("policies", "policies.jsonl")
    save_dataset(result.expert, out / "expert.jsonl")
    record("expert", "expert.jsonl")
    _ensure_dir(out / "predictions")
    for pid, ds in result.predictions.items():
        rel = f"predictions/{pid}.jsonl"
        save_dataset(ds, out / rel, with_ctx=False)
        record("predictions", rel, policy=pid)
    for pid, members in sorted(result.members.items()):
        _ensure_dir(out / "members")
        for m, ds in enumerate(members):
            rel = f"members/{pid}__m{m:02d}.jsonl"
            save_dataset(ds, out / rel, with_ctx=False)
            record("member", rel, policy=pid, member=m)
    _ensure_dir(out / "episodes")
    for pid, eps in result.episodes.items():
        for ep in eps:
            rel = f"episodes/{pid}__{ep.route_id}.jsonl"
            save_episodes([ep], out / rel)
            record("episodes", rel, policy=pid, track=ep.route_id)
    manifest = {
        "master_seed": cfg.seed,
        "stride": cfg.stride,
        "waypoints": cfg.waypoints,
        "estimator": cfg.estimator,
        "ensemble_members": settings.ensemble_members,
        "policies": sorted(result.predictions),
        "tracks": [t.track_id for t in tracks],
        "artifacts": sorted(arts, key=lambda a: a["path"]),
    }
    (out / MANIFEST).write_text(dumps(manifest) + "\n", encoding="utf-8")
    return manifest


# -- loading a study -------------------------------------------------------------------


@dataclass
class LoadedStudy:
    root: Path
    manifest: dict
    predictions: dict[str, Dataset]
    episodes: dict[str, list[EpisodeLog]]
    members: dict[str, list[Dataset]] = field(default_factory=dict)


def read_manifest(root: Path) -> dict:
    path = root / MANIFEST
    if not path.exists():
        raise ConfigError(f"not a study directory (no {MANIFEST}): {root}")
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid manifest: {exc}") from None
    for art in manifest.get("artifacts", []):
        p = root / art["path"]
        if not p.exists():
            raise ConfigError(f"manifest lists a missing artifact: {p}")
        if _sha256(p) != art["sha256"]:
            raise ConfigError(f"artifact changed since simulation: {p}")
    return manifest


def load_study(root: str | Path, need_predictions: bool = True, need_episodes: bool = True) -> LoadedStudy:
    root = Path(root)
    manifest = read_manifest(root)
    preds: dict[str, Dataset] = {}
    eps: dict[str, list[EpisodeLog]] = {}
    members: dict[str, list[Dataset]] = {}
    for art in manifest["artifacts"]:
        kind, p = art["kind"], root / art["path"]
        if kind == "predictions" and need_predictions:
            preds[art["policy"]] = load_dataset(p)
        elif kind == "member" and need_predictions:
            members.setdefault(art["policy"], []).append((art["member"], load_dataset(p)))
        elif kind == "episodes" and need_episodes:
            eps.setdefault(art["policy"], []).extend(load_episodes(p))
    ordered = {pid: [ds for _, ds in sorted(ms, key=lambda x: x[0])] for pid, ms in members.items()}
    return LoadedStudy(root, manifest, dict(sorted(preds.items())), dict(sorted(eps.items())), ordered)


def study_uncertainty(study: LoadedStudy, cfg: StudyConfig, target: Optional[str] = None) -> dict[str, UncertaintyEstimate]:
    members = None
    if cfg.estimator == "ensemble":
        if not study.members:
            raise ConfigError("estimator 'ensemble' needs a study simulated with --estimator ensemble")
        members = study.members
    return policy_uncertainty(study.predictions, members, target or cfg.uncertainty_target, cfg.uncertainty_source)


# -- offline and online scoring --------------------------------------------------------


def offline_reports(study: LoadedStudy, cfg: StudyConfig) -> dict[str, MetricReport]:
    est = study_uncertainty(study, cfg)
    cat = catalogue(cfg)
    return {
        pid: metric_report(ds, cat, est[pid].aligned_to(ds), pid, skip_degenerate=True)
        for pid, ds in study.predictions.items()
    }


def write_offline_csv(path: Path, reports: dict[str, MetricReport]) -> None:
    rows = []
    for pid in sorted(reports):
        rows.extend(reports[pid].rows())
    write_csv(path, ["policy_id", "metric_name", "value"], rows)


def score_offline(cfg: StudyConfig, path: Optional[str] = None) -> dict[str, MetricReport]:
    """Offline metric CSV for a study directory or a single prediction dataset."""
    src = Path(path or cfg.dataset or cfg.study_dir)
    if not src.exists():
        raise ConfigError(f"input does not exist: {src}")
    if src.is_dir():
        reports = offline_reports(load_study(src, need_episodes=False), cfg)
    else:
        ds = load_dataset(src)
        single = LoadedStudy(src.parent, {}, {src.stem: ds}, {})
        solo = replace(cfg, estimator="mc_samples", uncertainty_source="per_policy")
        reports = offline_reports(single, solo)
    out = _ensure_dir(Path(cfg.out))
    write_offline_csv(out / "offline_metrics.csv", reports)
    return reports


def online_scores(study: LoadedStudy, cfg: StudyConfig) -> dict[str, EpisodeScoreSet]:
    return {pid: score_set(eps, cfg.penalties) for pid, eps in study.episodes.items()}


def write_online_csv(path: Path, scores: dict[str, EpisodeScoreSet]) -> None:
    rows = []
    for pid in sorted(scores):
        rows.extend(scores[pid].rows(pid))
    write_csv(path, ["policy_id", "online_metric", "value"], rows)


def score_online(cfg: StudyConfig, path: Optional[str] = None) -> dict[str, EpisodeScoreSet]:
    """Online metric CSV for a study directory or a single episode file."""
    src = Path(path or cfg.episodes or cfg.study_dir)
    if not src.exists():
        raise ConfigError(f"input does not exist: {src}")
    if src.is_dir():
        scores = online_scores(load_study(src, need_predictions=False), cfg)
    else:
        scores = {src.stem: score_set(load_episodes(src), cfg.penalties)}
    out = _ensure_dir(Path(cfg.out))
    write_online_csv(out / "online_metrics.csv", scores)
    return scores


# -- UWE fit ---------------------------------------------------------------------------


def uwe_features(
    study: LoadedStudy, est: dict[str, UncertaintyEstimate], names: list[str], gammas: list[float]
) -> dict[float, np.ndarray]:
    kernels = base_kernels()
    missing = [n for n in names if n not in kernels]
    if missing:
        raise ConfigError(f"base_metrics: unknown metric(s) {missing}")
    chosen = {n: kernels[n] for n in names}
    pids = list(study.predictions)
    feats = {}
    for g in gammas:
        rows = []
        for pid in pids:
            comps = _per_policy(pid, uwe_components, study.predictions[pid], chosen, g, est[pid])
            rows.append([comps[n] for n in names])
        feats[float(g)] = np.array(rows)
    return feats


def fit(cfg: StudyConfig, study: Optional[LoadedStudy] = None, scores: Optional[dict] = None) -> tuple[UweConfig, FitDiagnostics]:
    """Fit gamma and beta against the driving score and write the config and diagnostics."""
    study = study or load_study(cfg.study_dir)
    scores = scores or online_scores(study, cfg)
    est = study_uncertainty(study, cfg)
    target = next(iter(est.values())).target
    names = list(cfg.base_metrics)
    pids = list(study.predictions)
    n_train = len(pids) - int(np.floor(len(pids) * cfg.holdout))
    if n_train < len(names) + 2:
        raise ConfigError(
            f"UWE fit needs at least {len(names) + 2} training policies for {len(names)} base metrics; "
            f"the study has {len(pids)} policies ({n_train} after holding out {cfg.holdout:g})"
        )
    feats = uwe_features(study, est, names, cfg.gamma_grid)
    ds = np.array([scores[p].driving_score for p in pids])
    uwe_cfg, diag = fit_uwe(
        feats, -ds, names, pids, cfg.gamma_grid, cfg.holdout, target, cfg.estimator, cfg.fit_alpha
    )
    out = _ensure_dir(Path(cfg.out))
    uwe_cfg.save(out / "uwe_config.txt")
    (out / "uwe_fit.json").write_text(dumps({"diagnostics": diag.as_dict()}) + "\n", encoding="utf-8")
    for flag in diag.flags:
        warnings.warn(f"UWE fit: {flag}", stacklevel=2)
    return uwe_cfg, diag


# -- correlation -----------------------------------------------------------------------


def uwe_column(study: LoadedStudy, cfg: StudyConfig, uwe_cfg: UweConfig) -> list[float]:
    est = study_uncertainty(study, cfg, uwe_cfg.target)
    return [_per_policy(pid, uwe, ds, uwe_cfg, est[pid]) for pid, ds in study.predictions.items()]


def _per_policy(pid: str, fn, *args):
    try:
        return fn(*args)
    except DegenerateWeightingError as exc:
        raise ConfigError(
            f"policy {pid!r}: {exc}; its uncertainty is zero on every record, so UWE is undefined "
            "(drop the policy or use --uncertainty-source fixed:<policy_id>)"
        ) from None


def correlation_table(
    study: LoadedStudy,
    cfg: StudyConfig,
    uwe_cfg: UweConfig,
    reports: Optional[dict[str, MetricReport]] = None,
    scores: Optional[dict[str, EpisodeScoreSet]] = None,
) -> PolicyFamilyTable:
    reports = reports or offline_reports(study, cfg)
    scores = scores or online_scores(study, cfg)
    table = family_table(reports, scores, cfg.online_metrics)
    values = dict(zip(study.predictions, uwe_column(study, cfg, uwe_cfg)))
    return table.with_offline(UWE_NAME, [values[p] for p in table.policies])


def write_correlation(cfg: StudyConfig, table: PolicyFamilyTable) -> CorrelationReport:
    ccfg = CorrelationConfig(cfg.primary_online, cfg.bootstrap, cfg.seed, cfg.ci_stat, cfg.ci_level)
    report = correlate(table, ccfg, jobs=cfg.jobs)
    out = _ensure_dir(Path(cfg.out))
    report.to_csv(out / "correlation.csv")
    sc = _ensure_dir(out / "scatter")
    for off in report.offline_order:
        for on in table.online_names:
            rows = scatter_rows(table, off, on)
            write_scatter(sc / f"{off}__{on}.csv", rows)
            if cfg.svg:
                svg = scatter_svg(rows, off, on, f"{off} vs {on}")
                (sc / f"{off}__{on}.svg").write_text(svg, encoding="utf-8")
    return report


def _uwe_config(cfg: StudyConfig, study: LoadedStudy, scores) -> UweConfig:
    if cfg.uwe_config:
        return UweConfig.load(cfg.uwe_config)
    return fit(cfg, study, scores)[0]


def correlate_study(cfg: StudyConfig) -> CorrelationReport:
    study = load_study(cfg.study_dir)
    scores = online_scores(study, cfg)
    table = correlation_table(study, cfg, _uwe_config(cfg, study, scores), scores=scores)
    return write_correlation(cfg, table)


def report(cfg: StudyConfig) -> CorrelationReport:
    """Offline scores, online scores, UWE fit and correlation over one study directory."""
    study = load_study(cfg.study_dir)
    out = _ensure_dir(Path(cfg.out))
    reports = offline_reports(study, cfg)
    write_offline_csv(out / "offline_metrics.csv", reports)
    scores = online_scores(study, cfg)
    write_online_csv(out / "online_metrics.csv", scores)
    uwe_cfg = _uwe_config(cfg, study, scores)
    table = correlation_table(study, cfg, uwe_cfg, reports, scores)
    return write_correlation(cfg, table)
