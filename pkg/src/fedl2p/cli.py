"""Command line runner: ``run`` executes pipeline stages, ``compare`` tabulates reports.

Exit codes: 0 success, 1 configuration error, 2 missing upstream artifact,
3 numerical divergence of a required stage.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import platform
import sys
import time
from dataclasses import replace
from importlib import metadata
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from .analysis import analyze_clusters
from .config import STREAMS, ConfigError, ExperimentConfig, load_config
from .data import make_benchmark, read_clients_csv, write_clients_csv
from .evaluation import EvalReport, l2p_budget, l2p_local, personalize_eval
from .federation import RoundRecord, pretrain_fedavg, profile_clients, run_fedl2p
from .metanets import MetaParams, hyper_outputs, init_meta
from .nn import DivergenceError
from .profile import write_profiles_csv

log = logging.getLogger("fedl2p")

STAGES = ("generate", "pretrain", "metatrain", "personalize", "analyze")
EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_DIVERGED = 0, 1, 2, 3


class MissingArtifact(FileNotFoundError):
    pass


class Artifacts:
    """File layout of one run directory."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    manifest = property(lambda self: self.root / "manifest.json")
    clients = property(lambda self: self.root / "data" / "clients.csv")
    pretrain_clients = property(lambda self: self.root / "data" / "pretrain_clients.csv")
    global_model = property(lambda self: self.root / "model" / "global_model.json")
    profiles = property(lambda self: self.root / "model" / "profiles.csv")
    meta = property(lambda self: self.root / "meta" / "meta_best.json")
    meta_final = property(lambda self: self.root / "meta" / "meta_final.json")
    rounds = property(lambda self: self.root / "meta" / "rounds.csv")
    eval_dir = property(lambda self: self.root / "eval")
    analysis_dir = property(lambda self: self.root / "analysis")

    def report(self, strategy: str) -> Path:
        return self.eval_dir / f"report_{strategy}"

    def require(self, *paths: Path) -> None:
        for p in paths:
            if not p.exists():
                raise MissingArtifact(f"missing artifact {p} (run the upstream stage first)")


def code_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def write_manifest(cfg: ExperimentConfig, art: Artifacts, stages: Sequence[str],
                   workers: int) -> None:
    art.root.mkdir(parents=True, exist_ok=True)
    done: list = []
    if art.manifest.exists():
        try:
            old = json.loads(art.manifest.read_text())
            if old.get("config") == json.loads(json.dumps(cfg.to_dict())):
                done = list(old.get("stages", []))
        except (OSError, ValueError):
            pass
    manifest = {
        "config": cfg.to_dict(),
        "seeds": {"root": cfg.seed, **{s: cfg.stream_seed(s) for s in STREAMS}},
        "stages": done + [s for s in stages if s not in done],
        "workers": workers,
        "code_version": code_version(),
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    art.manifest.write_text(json.dumps(manifest, indent=2))


def write_rounds_csv(path: Path, records: Sequence[RoundRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["round", "client_id", "val_loss", "n_samples", "diverged",
                    "mean_val_loss", "checksum"])
        for rec in records:
            for c in rec.clients:
                w.writerow([rec.round, c.client_id, repr(c.val_loss), c.n_samples,
                            int(c.diverged), repr(rec.mean_val_loss), rec.checksum])


# --------------------------------------------------------------------------
# Stages
# --------------------------------------------------------------------------


def stage_generate(cfg: ExperimentConfig, art: Artifacts, workers: int) -> None:
    bench = make_benchmark(cfg.data, cfg.rng("data"))
    art.clients.parent.mkdir(parents=True, exist_ok=True)
    write_clients_csv(art.clients, bench.clients)
    if bench.pretrain:
        write_clients_csv(art.pretrain_clients, bench.pretrain)
    log.info("generated %d clients and %d pretraining clients", len(bench.clients),
             len(bench.pretrain))


def stage_pretrain(cfg: ExperimentConfig, art: Artifacts, workers: int) -> None:
    art.require(art.pretrain_clients)
    pre = read_clients_csv(art.pretrain_clients)
    spec, p = cfg.model, cfg.pretrain
    model = nn.init_model(pre[0].x_train.shape[1], spec.hidden, cfg.data.n_classes,
                          cfg.rng("init"), batch_norm=spec.batch_norm, input_bn=spec.input_bn)
    model = pretrain_fedavg(model, pre, p.rounds, p.lr, cfg.stream_seed("pretrain"),
                            fraction=p.fraction, batch_size=p.batch_size,
                            local_epochs=p.local_epochs, exact_stats=p.exact_stats)
    art.global_model.parent.mkdir(parents=True, exist_ok=True)
    nn.save_model(model, art.global_model)
    acc = np.mean([nn.accuracy(model, c.x_test, c.y_test) for c in pre])
    log.info("pretrained global model, held-out accuracy %.4f", acc)


def _load_model_and_clients(art: Artifacts):
    art.require(art.global_model, art.clients)
    return nn.load_model(art.global_model), read_clients_csv(art.clients)


def stage_metatrain(cfg: ExperimentConfig, art: Artifacts, workers: int) -> None:
    model, clients = _load_model_and_clients(art)
    profiles = profile_clients(model, clients)
    write_profiles_csv(art.profiles, sorted(profiles.items()))
    meta = init_meta(model.n_layers, model.n_bn, cfg.stream_seed("meta_init"),
                     base_lr=cfg.eval.base_lr)
    fl = cfg.fl_config(workers)
    t0 = time.time()

    def progress(rec):
        if rec.round % 10 == 0 or rec.round == fl.rounds - 1:
            log.info("round %d mean val loss %.4f", rec.round, rec.mean_val_loss)

    res = run_fedl2p(model, clients, meta, fl, profiles, on_round=progress)
    if fl.rounds and all(math.isnan(r.mean_val_loss) for r in res.records):
        raise DivergenceError("every client diverged in every meta-training round")
    art.meta.parent.mkdir(parents=True, exist_ok=True)
    res.meta.save(art.meta)
    res.final.save(art.meta_final)
    write_rounds_csv(art.rounds, res.records)
    log.info("meta-training done in %.1fs, best round %d", time.time() - t0, res.best_round)


def stage_personalize(cfg: ExperimentConfig, art: Artifacts, workers: int) -> None:
    model, clients = _load_model_and_clients(art)
    profiles = profile_clients(model, clients)
    ev = cfg.eval
    art.eval_dir.mkdir(parents=True, exist_ok=True)
    common = dict(epochs=ev.epochs, repeats=ev.repeats, base_lr=ev.base_lr,
                  batch_size=cfg.metatrain.batch_size, seed=cfg.stream_seed("finetune"),
                  profiles=profiles)
    for strategy in ev.strategies:
        meta = None
        if strategy == "FedL2P":
            art.require(art.meta)
            meta = MetaParams.load(art.meta)
        elif strategy == "L2P":
            meta = l2p_meta(cfg, model, clients, profiles, art)
        report = personalize_eval(model, clients, strategy, meta=meta, **common)
        report.save(art.report(strategy))
        log.info("%-8s accuracy %.4f +- %.4f", strategy, report.mean, report.sd)


def l2p_meta(cfg, model, clients, profiles, art) -> dict:
    """Per-client meta-params learnt locally with the federated budget."""
    fl = cfg.fl_config(1)
    budget = l2p_budget(len(clients), fl)
    start = init_meta(model.n_layers, model.n_bn, cfg.stream_seed("meta_init"),
                      base_lr=cfg.eval.base_lr)
    out_dir = art.eval_dir / "l2p_meta"
    out_dir.mkdir(parents=True, exist_ok=True)
    metas = {}
    for c in clients:
        local_cfg = replace(fl, seed=fl.seed + 1 + c.client_id)
        metas[c.client_id] = l2p_local(model, c, start, local_cfg, budget, profiles[c.client_id])
        metas[c.client_id].save(out_dir / f"meta_client{c.client_id}.json")
    return metas


def stage_analyze(cfg: ExperimentConfig, art: Artifacts, workers: int) -> None:
    model, clients = _load_model_and_clients(art)
    art.require(art.meta)
    meta = MetaParams.load(art.meta)
    profiles = profile_clients(model, clients)
    outs = [hyper_outputs(meta, profiles[c.client_id].xi, profiles[c.client_id].feat_stats)
            for c in clients]
    vectors = {"xi": np.array([profiles[c.client_id].xi for c in clients]),
               "x": np.array([profiles[c.client_id].feat_stats for c in clients]),
               "beta": np.array([o.beta for o in outs]),
               "eta": np.array([o.eta for o in outs])}
    res = analyze_clusters(vectors, [c.client_id for c in clients], [c.domain_id for c in clients],
                           seed=cfg.stream_seed("clustering"), cap=cfg.analysis.distance_cap)
    res.save(art.analysis_dir)
    log.info("ARI %s", {k: round(v, 3) for k, v in res.ari.items()})


STAGE_FUNCS = {"generate": stage_generate, "pretrain": stage_pretrain,
               "metatrain": stage_metatrain, "personalize": stage_personalize,
               "analyze": stage_analyze}


def run(config_path: str, stage: str = "all", out: str | None = None, workers: int = 1,
        seed: int | None = None) -> int:
    try:
        cfg = load_config(config_path)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    if seed is not None:
        cfg = cfg.with_seed(seed)
    stages = STAGES if stage == "all" else (stage,)
    art = Artifacts(out if out is not None else Path("runs") / Path(config_path).stem)
    write_manifest(cfg, art, stages, workers)
    try:
        for name in stages:
            log.info("stage %s", name)
            STAGE_FUNCS[name](cfg, art, workers)
    except MissingArtifact as exc:
        log.error("%s", exc)
        return EXIT_MISSING
    except (DivergenceError, FloatingPointError) as exc:
        log.error("numerical divergence: %s", exc)
        return EXIT_DIVERGED
    return EXIT_OK


# --------------------------------------------------------------------------
# compare
# --------------------------------------------------------------------------


def compare(paths: Sequence[str], out: str | None = None) -> list[dict]:
    """Mean and SD accuracy per report over the clients all reports share.

    ``delta`` is each report's mean minus the first report's mean.
    """
    if len(paths) < 2:
        raise ValueError("compare needs at least two reports")
    reports = [EvalReport.load(p) for p in paths]
    shared = set.intersection(*({c.client_id for c in r.clients} for r in reports))
    if not shared:
        raise ValueError("reports share no clients")
    rows = []
    for path, r in zip(paths, reports):
        accs = [c.accuracy for c in r.clients if c.client_id in shared]
        rows.append({"report": str(path), "strategy": r.strategy, "clients": len(accs),
                     "mean": float(np.mean(accs)), "sd": r.sd})
    for row in rows:
        row["delta"] = row["mean"] - rows[0]["mean"]
    if out is not None:
        stem = Path(out)
        stem.parent.mkdir(parents=True, exist_ok=True)
        with open(stem.with_suffix(".csv"), "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
        stem.with_suffix(".txt").write_text(format_table(rows))
    return rows


def format_table(rows: Sequence[dict]) -> str:
    lines = [f"{'strategy':<10} {'clients':>7} {'accuracy (mean +- sd)':>24} {'delta':>8}"]
    for r in rows:
        acc = f"{100 * r['mean']:.2f} +- {100 * r['sd']:.2f}"
        lines.append(f"{r['strategy']:<10} {r['clients']:>7d} {acc:>24} {100 * r['delta']:>+8.2f}")
    return "\n".join(lines) + "\n"


def main(argv: Sequence[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="fedl2p", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run pipeline stages from a config file")
    p_run.add_argument("config")
    p_run.add_argument("--stage", choices=("all",) + STAGES, default="all")
    p_run.add_argument("--out", help="output directory (default runs/<config name>)")
    p_run.add_argument("--workers", type=int, default=1, help="parallel client processes")
    p_run.add_argument("--seed", type=int, help="override the root seed")
    p_cmp = sub.add_parser("compare", help="tabulate evaluation reports")
    p_cmp.add_argument("reports", nargs="+")
    p_cmp.add_argument("--out", help="write <out>.csv and <out>.txt")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "run":
        if args.workers < 1:
            parser.error("--workers must be at least 1")
        return run(args.config, args.stage, args.out, args.workers, args.seed)
    try:
        rows = compare(args.reports, args.out)
    except ValueError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    sys.stdout.write(format_table(rows))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
