"""Command-line entry point: ``crashkit <subcommand> ...``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 internal error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

from crashkit import config as cfgmod
from crashkit import distill, filtering, realism, render, scenario, synth, vocab
from crashkit.scenario import atomic_write_text, dumps
from crashkit.simulator import SimConfig, SimulationError, format_summary, make_feasible
from crashkit.structured import NoTemplateMatch, SceneParseError, TemplateCatalog, TemplateError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 2, 3, 4
DATA_ERRORS = (
    scenario.ScenarioParseError,
    scenario.ScenarioValidationError,
    SceneParseError,
    TemplateError,
    NoTemplateMatch,
    vocab.VocabularyError,
    filtering.FilterError,
    distill.DistillError,
    realism.RealismError,
    cfgmod.ConfigError,
    synth.PlacementError,
    SimulationError,
    OSError,
)
REPORT_NAME = "filter_report.json"

log = logging.getLogger("crashkit")


def _config(args: argparse.Namespace) -> cfgmod.ToolkitConfig:
    return cfgmod.load_config(getattr(args, "config", None))


def _catalog(cfg: cfgmod.ToolkitConfig, path: str | None) -> TemplateCatalog:
    return TemplateCatalog.load(path or cfg.paths.catalog or None)


# -- subcommands ---------------------------------------------------------------


def cmd_generate(args: argparse.Namespace) -> int:
    cfg = _config(args)
    catalog = _catalog(cfg, args.catalog)
    templates = catalog.select(args.templates)
    maps = None if args.map == "any" else [m.strip() for m in args.map.split(",")]
    for name in maps or []:
        if name not in synth.BUNDLED_MAPS:
            raise scenario.ScenarioParseError(f"unknown map {name!r}; choose from {synth.BUNDLED_MAPS}")
    result = synth.generate_corpus(
        templates, args.count, args.seed, maps, args.test_fraction, cfg.synthesis, prefix=args.prefix
    )
    for sid, reason in result.failures:
        log.warning("%s: synthesis failed: %s", sid, reason)
    if args.count and not result.dataset.scenarios:
        raise synth.PlacementError("every requested scenario failed to synthesize")
    scenario.save_dataset(result.dataset, args.out)
    print(f"wrote {len(result.dataset)} scenarios to {args.out} ({len(result.failures)} failed)")
    return EXIT_OK


def cmd_logs(args: argparse.Namespace) -> int:
    cfg = _config(args)
    m = synth.load_bundled_map(args.map)
    corpus = synth.random_ego_corpus(args.count, args.seed, m, cfg.synthesis)
    width = max(4, len(str(max(args.count - 1, 0))))
    ds = scenario.Dataset({f"log{i:0{width}d}": s for i, s in enumerate(corpus)})
    scenario.save_dataset(ds, args.out)
    print(f"wrote {len(ds)} ego driving logs to {args.out}")
    return EXIT_OK


def cmd_filter(args: argparse.Namespace) -> int:
    cfg = _config(args)
    ds = scenario.load_dataset(args.inp)
    v = vocab.load_vocabulary(args.vocab)
    kept, report = filtering.filter_dataset(ds, cfg.filter_config(v))
    scenario.save_dataset(kept, args.out)
    atomic_write_text(Path(args.out) / REPORT_NAME, dumps(report.to_dict()))
    print(f"total {report.total}  after step 1 {report.after_step1}  after step 2 {report.after_step2}")
    return EXIT_OK


def cmd_cluster(args: argparse.Namespace) -> int:
    cfg = cfgmod.override(_config(args), "vocabulary", k=args.k, n=args.n, seed=args.seed, max_iters=args.max_iters)
    ds = scenario.load_dataset(args.inp)
    vs = cfg.vocabulary
    corpus = [ds.scenarios[i] for i in sorted(ds.scenarios)]
    v = vocab.build_vocabulary(corpus, vs.k, vs.n, vs.seed, vs.max_iters)
    vocab.save_vocabulary(v, args.out)
    print(f"vocabulary of {v.k} entries from {vs.n} samples, inertia {v.build_meta['inertia']:.3f}")
    return EXIT_OK


def cmd_score(args: argparse.Namespace) -> int:
    cfg = _config(args)
    ds = scenario.load_dataset(args.inp)
    v = vocab.load_vocabulary(args.vocab)
    table = distill.build_score_table(ds, v, cfg.simulator)
    distill.save_score_table(table, args.out)
    print(f"scored {len(table.rows)} scenarios x {table.k} entries")
    return EXIT_OK


def _train_settings(args: argparse.Namespace) -> cfgmod.ToolkitConfig:
    cfg = cfgmod.override(
        _config(args), "training", lr=args.lr, steps=args.steps, batch=args.batch, ratio=args.ratio, seed=args.seed,
        w_r=args.w_r, w_c=args.w_c, hidden=args.hidden, optimizer=args.optimizer,
    )
    try:
        cfg.train_config()
        cfg.mix_config()
    except ValueError as exc:
        raise cfgmod.ConfigError(str(exc)) from exc
    return cfg


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _train_settings(args)
    mix = cfg.mix_config()
    tables = [distill.load_score_table(p) for p in args.tables]
    reg_ds = scenario.load_dataset(args.regular)
    regular = distill.training_set(reg_ds, tables[0], reg_ds.ids("train"))
    collision = None
    if args.collision:
        if len(tables) < 2:
            raise cfgmod.ConfigError("--tables needs a second table for the collision set")
        col_ds = scenario.load_dataset(args.collision)
        collision = distill.training_set(col_ds, tables[1], col_ds.ids("train"))
    result = distill.train(regular, collision, mix, cfg.train_config())
    meta = {"ratio": cfg.training.ratio, "steps": cfg.training.steps, "seed": cfg.training.seed}
    distill.save_model(result.model, args.out, meta)
    log_path = args.log or str(Path(args.out).with_suffix("")) + ".log.csv"
    atomic_write_text(log_path, result.log_csv())
    losses = result.losses
    if len(losses):
        print(f"trained {len(losses)} steps; loss {losses[0]:.3f} -> {losses[-1]:.3f}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _config(args)
    model = distill.load_model(args.model)
    v = vocab.load_vocabulary(args.vocab)
    ds = scenario.load_dataset(args.testset)
    if args.split != "all":
        ds = ds.subset(args.split)
    table = distill.load_score_table(args.tables) if args.tables else None
    summary, chosen = distill.evaluate_planner(model, ds, v, table, cfg.simulator)
    print(format_summary(summary))
    if args.out:
        atomic_write_text(args.out, dumps({"summary": summary, "chosen": chosen, "count": len(chosen)}))
    return EXIT_OK


def cmd_eval_realism(args: argparse.Namespace) -> int:
    real = scenario.load_dataset(args.real)
    gen = scenario.load_dataset(args.generated)
    report = realism.realism_report(real.scenarios, gen.scenarios)
    out = Path(args.out)
    realism.save_report(report, out, out.with_suffix(".csv"))
    print(report.to_csv(), end="")
    return EXIT_OK


def cmd_render(args: argparse.Namespace) -> int:
    s = scenario.load_scenario(args.scenario)
    plan = None
    if args.model or args.vocab:
        if not (args.model and args.vocab):
            raise cfgmod.ConfigError("--model and --vocab go together")
        model = distill.load_model(args.model)
        v = vocab.load_vocabulary(args.vocab)
        entry, _, _ = distill.plan(s, model, v)
        plan = make_feasible(entry, s.ego.poses[0], SimConfig(), s.timestep).states
    atomic_write_text(args.out, render.render_svg(s, plan))
    return EXIT_OK


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crashkit", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name: str, fn, help_text: str, config: bool = True) -> argparse.ArgumentParser:
        sp = sub.add_parser(name, help=help_text, description=help_text)
        sp.set_defaults(func=fn)
        if config:
            sp.add_argument("--config", help="INI configuration file; flags override its values")
        return sp

    g = add("generate", cmd_generate, "synthesize scenarios from prompt templates")
    g.add_argument("--templates", default="all", help="'all', a kind ('collision'/'regular') or comma-separated names")
    g.add_argument("--map", default="any", help="bundled map name(s), comma-separated, or 'any'")
    g.add_argument("--out", required=True, help="output dataset directory")
    g.add_argument("--count", type=int, default=10, help="number of scenarios")
    g.add_argument("--seed", type=int, default=0, help="64-bit seed")
    g.add_argument("--test-fraction", type=float, default=0.0, help="probability of assigning a scenario to the test split")
    g.add_argument("--catalog", help="template catalog JSON (defaults to the bundled one)")
    g.add_argument("--prefix", default="scn", help="scenario id prefix")

    lg = add("logs", cmd_logs, "synthesize ego-only driving logs for vocabulary building")
    lg.add_argument("--out", required=True, help="output dataset directory")
    lg.add_argument("--count", type=int, default=500, help="number of logs")
    lg.add_argument("--seed", type=int, default=0, help="64-bit seed")
    lg.add_argument("--map", default="straight_bidir", choices=synth.BUNDLED_MAPS, help="bundled map")

    f = add("filter", cmd_filter, "apply lane-compliance, collision and avoidance filtering")
    f.add_argument("--in", dest="inp", required=True, help="input dataset directory")
    f.add_argument("--out", required=True, help="output directory for retained scenarios and filter_report.json")
    f.add_argument("--vocab", required=True, help="trajectory vocabulary JSON")

    c = add("cluster", cmd_cluster, "build a trajectory vocabulary from ego tracks")
    c.add_argument("--in", dest="inp", required=True, help="dataset directory of driving logs")
    c.add_argument("--k", type=int, help="vocabulary size")
    c.add_argument("--out", required=True, help="output vocabulary JSON")
    c.add_argument("--n", type=int, help="number of sampled trajectory windows")
    c.add_argument("--seed", type=int, help="64-bit seed")
    c.add_argument("--max-iters", type=int, help="Lloyd iteration cap")

    s = add("score", cmd_score, "simulate every vocabulary entry on every scenario")
    s.add_argument("--in", dest="inp", required=True, help="input dataset directory")
    s.add_argument("--vocab", required=True, help="trajectory vocabulary JSON")
    s.add_argument("--out", required=True, help="output score table JSON")

    t = add("train", cmd_train, "train the score head on regular and collision score tables")
    t.add_argument("--regular", required=True, help="regular dataset directory (train split is used)")
    t.add_argument("--collision", help="collision dataset directory (train split is used)")
    t.add_argument("--tables", nargs="+", required=True, help="score tables: regular first, then collision")
    t.add_argument("--ratio", help="regular:collision batch ratio, e.g. 10:1")
    t.add_argument("--out", required=True, help="output model checkpoint JSON")
    t.add_argument("--log", help="training log CSV (default: next to the checkpoint)")
    t.add_argument("--steps", type=int, help="optimizer steps")
    t.add_argument("--lr", type=float, help="learning rate")
    t.add_argument("--batch", type=int, help="batch size")
    t.add_argument("--w-r", dest="w_r", type=float, help="regular loss weight")
    t.add_argument("--w-c", dest="w_c", type=float, help="collision loss weight")
    t.add_argument("--hidden", help="hidden layer sizes, comma-separated")
    t.add_argument("--optimizer", choices=("adam", "sgd"), help="update rule")
    t.add_argument("--seed", type=int, help="64-bit seed")

    e = add("eval", cmd_eval, "closed-loop evaluation of a trained planner")
    e.add_argument("--model", required=True, help="model checkpoint JSON")
    e.add_argument("--testset", required=True, help="dataset directory")
    e.add_argument("--vocab", required=True, help="trajectory vocabulary JSON")
    e.add_argument("--tables", help="score table for the test set (skips re-simulation)")
    e.add_argument("--split", default="test", help="split to evaluate, or 'all'")
    e.add_argument("--out", help="summary JSON")

    r = add("eval-realism", cmd_eval_realism, "MMD and displacement realism of generated against real scenarios", config=False)
    r.add_argument("--real", required=True, help="real dataset directory")
    r.add_argument("--generated", required=True, help="generated dataset directory")
    r.add_argument("--out", required=True, help="report JSON; a CSV is written next to it")

    d = add("render", cmd_render, "draw a scenario as SVG", config=False)
    d.add_argument("--scenario", required=True, help="scenario JSON file")
    d.add_argument("--out", required=True, help="output SVG")
    d.add_argument("--model", help="model checkpoint; draws its selected plan (needs --vocab)")
    d.add_argument("--vocab", help="trajectory vocabulary JSON")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - last-resort mapping to the internal-error exit code
        log.exception("internal error")
        print(f"internal error: {exc!r}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
