"""Command-line front end: training, evaluation, ablations, reports.

Configuration is a flat ``key = value`` text file; every key has a default
so a config file is optional. ``--set key=value`` overrides win over the
file, ``--seed`` wins over both for the seed. Each run writes its resolved
configuration to ``config.echo`` inside the run directory, and nothing is
written outside that directory.

Exit codes: 0 ok, 2 usage/config error, 3 data error, 4 divergence.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import __version__
from .data import (SyntheticDatasetSpec, load_dataset, load_manifest,
                   make_synthetic_dataset, _class_word_pool)
from .encoders import EncoderConfig, TextEncoder
from .errors import (ConfigError, DataError, DivergenceError, InputError,
                     ProtocolError, TemplateError)
from .evaluator import (EvalReport, centroid_distance_matrix,
                        evaluate_generalized, evaluate_standard)
from .model import PromptedClip
from .prompts import (ClassVocabulary, generate_random_templates, init_prompts,
                      init_prompts_from_words, load_template_bank,
                      split_templates)
from .tokenizer import Tokenizer
from .trainer import (TrainConfig, Trainer, load_checkpoint, sample_few_shot,
                      save_checkpoint)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_DIVERGENCE = 4

COMMANDS = ("train", "eval", "ablate-templates", "ablate-loss",
            "ablate-components", "distract", "report")

DEFAULTS = {
    # dataset
    "manifest": "",              # external dataset; empty -> synthetic fixture
    "n_base": "10",
    "n_new": "10",
    "samples_per_class": "20",
    "test_samples": "20",
    "separation": "16.0",
    "context_shift": "0.3",
    "shift_template": "a picture of a {}",
    "data_seed": "0",
    "noise_seed": "100",
    "center_steps": "600",
    # model / prompts
    "templates": "6",            # 1 | 6 | 34 | 100 | path
    "groups": "3",
    "m_prompts": "4",
    "prompt_init": "words",      # words | gauss
    "prompt_words": "a photo of a",
    "jitter": "0.3",
    # training
    "alpha_vl": "1.0",
    "alpha_tt": "20.0",
    "lr": "0.02",
    "epochs": "150",
    "warmup_epochs": "5",
    "batch_size": "16",
    "shots": "16",
    "loss_kind": "ce",
    "ln_finetune": "0",
    "virtual": "",               # "new" | comma-separated names | ""
    "momentum": "0.0",
    "clip_norm": "10.0",
    "seed": "0",
    # evaluation
    "mode": "learned",           # learned | zero-shot
    "checkpoint": "",            # eval: load this checkpoint before scoring
    "distractors": "10",         # distract: how many pool names to add
}


# -- config handling -----------------------------------------------------------


def parse_config_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def resolve_config(path: str | None, overrides: list[str],
                   seed: int | None) -> dict[str, str]:
    cfg = dict(DEFAULTS)

    def merge(pairs: dict[str, str], origin: str):
        for k, v in pairs.items():
            if k not in DEFAULTS:
                raise ConfigError(f"{origin}: unknown config key {k!r}")
            cfg[k] = v

    if path:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                merge(parse_config_text(fh.read()), path)
        except OSError as exc:
            raise DataError(f"cannot read config file {path}: {exc}") from exc
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, _, v = item.partition("=")
        merge({k.strip(): v.strip()}, "--set")
    if seed is not None:
        cfg["seed"] = str(seed)
    return cfg


def _num(cfg, key, kind):
    try:
        return kind(cfg[key])
    except ValueError as exc:
        raise ConfigError(f"config key {key}={cfg[key]!r} is not {kind.__name__}") from exc


def _flag(cfg, key) -> bool:
    v = cfg[key].lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off", ""):
        return False
    raise ConfigError(f"config key {key}={cfg[key]!r} is not a boolean")


# -- run directory -------------------------------------------------------------


def run_directory(out: str | None, command: str, cfg: dict[str, str]) -> str:
    if out:
        path = out
    else:
        root = os.environ.get("LASP_OUT_ROOT", "runs")
        path = os.path.join(root, f"{command}-seed{cfg['seed']}")
    os.makedirs(path, exist_ok=True)
    os.makedirs(os.path.join(path, "matrices"), exist_ok=True)
    return path


def write_config_echo(run_dir: str, cfg: dict[str, str], command: str):
    lines = [f"command = {command}"] + [f"{k} = {cfg[k]}" for k in sorted(cfg)]
    with open(os.path.join(run_dir, "config.echo"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def write_report(run_dir: str, table: str, kv_lines: list[str]):
    with open(os.path.join(run_dir, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(table.rstrip("\n") + "\n")
    with open(os.path.join(run_dir, "report.kv"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(kv_lines) + "\n")


def write_matrix(run_dir: str, name: str, matrix: np.ndarray):
    np.savetxt(os.path.join(run_dir, "matrices", name), matrix, fmt="%.8f")


# -- shared builders -----------------------------------------------------------


class RunContext:
    """Dataset, class names and encoder config resolved from one config."""

    def __init__(self, cfg: dict[str, str]):
        self.cfg = cfg
        self.enc_cfg = EncoderConfig()
        if cfg["manifest"]:
            manifest = load_manifest(cfg["manifest"])
            self.splits = load_dataset(manifest)
            self.base_names = list(manifest.base_classes)
            self.new_names = list(manifest.new_classes)
        else:
            spec = SyntheticDatasetSpec(
                n_base=_num(cfg, "n_base", int),
                n_new=_num(cfg, "n_new", int),
                samples_per_class=_num(cfg, "samples_per_class", int),
                test_samples=_num(cfg, "test_samples", int),
                separation=_num(cfg, "separation", float),
                seed=_num(cfg, "data_seed", int),
                noise_seed=_num(cfg, "noise_seed", int),
                center_steps=_num(cfg, "center_steps", int),
                context_shift=_num(cfg, "context_shift", float),
                shift_template=cfg["shift_template"],
            )
            data = make_synthetic_dataset(spec, self.enc_cfg,
                                          template_source=cfg["templates"])
            self.splits = data.splits
            self.base_names = list(data.base_names)
            self.new_names = list(data.new_names)

    def virtual_names(self, spec: str) -> tuple[str, ...]:
        spec = spec.strip()
        if not spec:
            return ()
        if spec == "new":
            return tuple(self.new_names)
        return tuple(n.strip() for n in spec.split(",") if n.strip())

    def build_model(self, seed: int, templates: str | None = None,
                    groups: int | None = None) -> PromptedClip:
        cfg = self.cfg
        groups = groups if groups is not None else _num(cfg, "groups", int)
        source = templates if templates is not None else cfg["templates"]
        bank = load_template_bank(source)
        if groups > 1:
            bank = split_templates(bank, groups, 0)
        m = _num(cfg, "m_prompts", int)
        enc = self.enc_cfg
        if cfg["prompt_init"] == "words":
            tok = Tokenizer(max_len=enc.max_len)
            words = tok.words_of(cfg["prompt_words"])[:m]
            if not words:
                raise ConfigError("prompt_words yielded no tokens")
            prompts = init_prompts_from_words(TextEncoder(enc), tok, words,
                                              groups, enc.d, seed,
                                              _num(cfg, "jitter", float))
        elif cfg["prompt_init"] == "gauss":
            prompts = init_prompts(groups, m, enc.d_tok, enc.d, seed)
        else:
            raise ConfigError(f"unknown prompt_init {cfg['prompt_init']!r}")
        return PromptedClip(enc, prompts, bank)

    def train_config(self, seed: int, **over) -> TrainConfig:
        cfg = self.cfg
        kw = dict(alpha_vl=_num(cfg, "alpha_vl", float),
                  alpha_tt=_num(cfg, "alpha_tt", float),
                  lr=_num(cfg, "lr", float),
                  epochs=_num(cfg, "epochs", int),
                  warmup_epochs=_num(cfg, "warmup_epochs", int),
                  batch_size=_num(cfg, "batch_size", int),
                  shots=_num(cfg, "shots", int),
                  m_prompts=_num(cfg, "m_prompts", int),
                  groups=_num(cfg, "groups", int),
                  ln_finetune=_flag(cfg, "ln_finetune"),
                  seed=seed,
                  loss_kind=cfg["loss_kind"],
                  virtual_classes=self.virtual_names(cfg["virtual"]),
                  momentum=_num(cfg, "momentum", float),
                  clip_norm=_num(cfg, "clip_norm", float))
        kw.update(over)
        return TrainConfig(**kw)

    def train(self, seed: int, model: PromptedClip | None = None, **over):
        tcfg = self.train_config(seed, **over)
        model = model or self.build_model(seed, groups=tcfg.groups)
        trainer = Trainer(model, ClassVocabulary(list(self.base_names)), tcfg)
        pool = self.splits["base-train"]
        train_set = sample_few_shot(pool.images, pool.labels, tcfg.shots, seed)
        log = trainer.fit(train_set)
        return model, tcfg, log

    def evaluate(self, model: PromptedClip, mode: str = "learned") -> EvalReport:
        return evaluate_standard(model, self.splits["base-test"],
                                 self.splits["new-test"], self.base_names,
                                 self.new_names, mode=mode)


# -- commands ------------------------------------------------------------------


def cmd_train(cfg: dict[str, str], run_dir: str) -> int:
    ctx = RunContext(cfg)
    seed = _num(cfg, "seed", int)
    model, tcfg, log = ctx.train(seed)
    with open(os.path.join(run_dir, "train.log"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(log.lines()) + ("\n" if log.rows else ""))
    save_checkpoint(os.path.join(run_dir, "checkpoint.bin"), model, tcfg,
                    steps=len(log.rows))
    rep = ctx.evaluate(model)
    dist, mean_d = centroid_distance_matrix(model, ctx.base_names)
    rep.mean_distance = mean_d
    write_matrix(run_dir, "centroid_distance.txt", dist)
    write_report(run_dir, rep.table(), rep.kv_lines())
    print(rep.table())
    return EXIT_OK


def cmd_eval(cfg: dict[str, str], run_dir: str) -> int:
    ctx = RunContext(cfg)
    seed = _num(cfg, "seed", int)
    model = ctx.build_model(seed)
    if cfg["checkpoint"]:
        if not os.path.exists(cfg["checkpoint"]):
            raise DataError(f"checkpoint not found: {cfg['checkpoint']}")
        load_checkpoint(cfg["checkpoint"], model)
    rep = ctx.evaluate(model, mode=cfg["mode"])
    dist, mean_d = centroid_distance_matrix(model, ctx.base_names)
    rep.mean_distance = mean_d
    write_matrix(run_dir, "centroid_distance.txt", dist)
    write_report(run_dir, rep.table(), rep.kv_lines())
    print(rep.table())
    return EXIT_OK


def _grid_report(rows: list[tuple[str, EvalReport]]) -> tuple[str, list[str]]:
    width = max(len(n) for n, _ in rows)
    table = [f"{'config':<{width}}  {'base':>7}  {'new':>7}  {'H':>7}"]
    kv: list[str] = []
    for name, rep in rows:
        table.append(f"{name:<{width}}  {rep.base_acc:7.2f}  {rep.new_acc:7.2f}"
                     f"  {rep.h:7.2f}")
        kv += [f"base_acc, {name}, {rep.base_acc:.4f}",
               f"new_acc, {name}, {rep.new_acc:.4f}",
               f"harmonic_mean, {name}, {rep.h:.4f}"]
    return "\n".join(table), kv


def cmd_ablate_templates(cfg: dict[str, str], run_dir: str) -> int:
    ctx = RunContext(cfg)
    seed = _num(cfg, "seed", int)
    groups = _num(cfg, "groups", int)
    rows = []
    for count in (1, 6, 34, 100):
        bank = load_template_bank(str(count))
        if len(bank) >= groups > 1:
            bank = split_templates(bank, groups, 0)
        g = bank.groups
        model = PromptedClip(ctx.enc_cfg, _prompts_for(ctx, cfg, g, seed), bank)
        model, _, _ = ctx.train(seed, model=model, groups=g)
        rows.append((f"hand-{count}", ctx.evaluate(model)))
    for count in (1, 6, 34, 100):
        bank = generate_random_templates(count, 3, 7, seed)
        if len(bank) >= groups > 1:
            bank = split_templates(bank, groups, 0)
        g = bank.groups
        model = PromptedClip(ctx.enc_cfg, _prompts_for(ctx, cfg, g, seed), bank)
        model, _, _ = ctx.train(seed, model=model, groups=g)
        rows.append((f"random-{count}", ctx.evaluate(model)))
    table, kv = _grid_report(rows)
    write_report(run_dir, table, kv)
    print(table)
    return EXIT_OK


def _prompts_for(ctx: RunContext, cfg: dict[str, str], groups: int, seed: int):
    enc = ctx.enc_cfg
    m = _num(cfg, "m_prompts", int)
    if cfg["prompt_init"] == "words":
        tok = Tokenizer(max_len=enc.max_len)
        words = tok.words_of(cfg["prompt_words"])[:m]
        return init_prompts_from_words(TextEncoder(enc), tok, words, groups,
                                       enc.d, seed, _num(cfg, "jitter", float))
    return init_prompts(groups, m, enc.d_tok, enc.d, seed)


def cmd_ablate_loss(cfg: dict[str, str], run_dir: str) -> int:
    ctx = RunContext(cfg)
    seed = _num(cfg, "seed", int)
    rows = []
    for kind in ("ce", "l1", "l2"):
        model, _, _ = ctx.train(seed, loss_kind=kind)
        rows.append((kind, ctx.evaluate(model)))
    table, kv = _grid_report(rows)
    write_report(run_dir, table, kv)
    print(table)
    return EXIT_OK


def cmd_ablate_components(cfg: dict[str, str], run_dir: str) -> int:
    """Cumulative ladder: baseline, +text-to-text, +grouped, +align, +virtual."""
    ctx = RunContext(cfg)
    seed = _num(cfg, "seed", int)
    alpha_tt = _num(cfg, "alpha_tt", float)
    groups = _num(cfg, "groups", int)
    virtual = ctx.virtual_names(cfg["virtual"]) or tuple(ctx.new_names)
    ladder = [
        ("baseline", dict(alpha_tt=0.0, groups=1, ln_finetune=False,
                          virtual_classes=())),
        ("+text-to-text", dict(alpha_tt=alpha_tt, groups=1, ln_finetune=False,
                               virtual_classes=())),
        ("+grouped", dict(alpha_tt=alpha_tt, groups=groups, ln_finetune=False,
                          virtual_classes=())),
        ("+align", dict(alpha_tt=alpha_tt, groups=groups, ln_finetune=True,
                        virtual_classes=())),
        ("+virtual", dict(alpha_tt=alpha_tt, groups=groups, ln_finetune=True,
                          virtual_classes=virtual)),
    ]
    rows = []
    for name, over in ladder:
        model, _, _ = ctx.train(seed, **over)
        rows.append((name, ctx.evaluate(model)))
    table, kv = _grid_report(rows)
    write_report(run_dir, table, kv)
    print(table)
    return EXIT_OK


def cmd_distract(cfg: dict[str, str], run_dir: str) -> int:
    ctx = RunContext(cfg)
    seed = _num(cfg, "seed", int)
    n_extra = _num(cfg, "distractors", int)
    used = set(ctx.base_names) | set(ctx.new_names)
    pool = [w for w in _class_word_pool() if w not in used]
    order = np.random.default_rng(_num(cfg, "data_seed", int)).permutation(len(pool))
    distractors = [pool[int(i)] for i in order[:n_extra]]
    if len(distractors) < n_extra:
        raise DataError("not enough pool words for the requested distractors")

    plain, _, _ = ctx.train(seed, virtual_classes=())
    aware, _, _ = ctx.train(seed, virtual_classes=tuple(ctx.new_names)
                            + tuple(distractors))
    wo, wd = evaluate_generalized(plain, ctx.splits["base-test"],
                                  ctx.splits["new-test"], ctx.base_names,
                                  ctx.new_names, distractors)
    _, wd_aware = evaluate_generalized(aware, ctx.splits["base-test"],
                                       ctx.splits["new-test"], ctx.base_names,
                                       ctx.new_names, distractors)
    rows = [("no-distractors", wo), ("with-distractors", wd),
            ("virtual-aware", wd_aware)]
    table, kv = _grid_report(rows)
    mean = lambda r: 0.5 * (r.base_acc + r.new_acc)
    drop = mean(wo) - mean(wd)
    recovered = mean(wd_aware) - mean(wd)
    table += (f"\n\ndistractor names: {', '.join(distractors)}"
              f"\naccuracy drop: {drop:.2f}"
              f"\nrecovered by virtual classes: {recovered:.2f}")
    kv += [f"distractor_drop, all, {drop:.4f}",
           f"distractor_recovered, all, {recovered:.4f}"]
    write_report(run_dir, table, kv)
    print(table)
    return EXIT_OK


def cmd_report(cfg: dict[str, str], run_dir: str) -> int:
    path = os.path.join(run_dir, "report.kv")
    if not os.path.exists(path):
        raise DataError(f"no report.kv in {run_dir}")
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    rows = []
    for ln in lines:
        parts = [p.strip() for p in ln.split(",")]
        if len(parts) != 3:
            raise DataError(f"malformed report line: {ln!r}")
        rows.append(parts)
    w0 = max(len(r[0]) for r in rows)
    w1 = max(len(r[1]) for r in rows)
    out = "\n".join(f"{m:<{w0}}  {t:<{w1}}  {v:>10}" for m, t, v in rows)
    print(out)
    return EXIT_OK


# -- entry point ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lasp",
                                     description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="flat key=value file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="run directory")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
    return parser


HANDLERS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate-templates": cmd_ablate_templates,
    "ablate-loss": cmd_ablate_loss,
    "ablate-components": cmd_ablate_components,
    "distract": cmd_distract,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args.config, args.set, args.seed)
        if args.command == "report":
            if not args.out:
                raise ConfigError("report needs --out pointing at a run directory")
            return cmd_report(cfg, args.out)
        run_dir = run_directory(args.out, args.command, cfg)
        write_config_echo(run_dir, cfg, args.command)
        return HANDLERS[args.command](cfg, run_dir)
    except (ConfigError, TemplateError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, InputError, ProtocolError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE


if __name__ == "__main__":
    sys.exit(main())
