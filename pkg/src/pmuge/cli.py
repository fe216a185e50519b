"""Command line entry points: toygen, decompose, train, generate, simulate-inter, evaluate.

Every setting can come from a ``--config`` file of ``key=value`` lines or a
flag of the same name (dashes for underscores); flags win. Unknown keys are
rejected. Each run writes ``resolved_config.txt`` next to its outputs.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .dataio import (ConfigError, DataFormatError, Label, ToyConfig, generate_toy_corpus,
                     read_manifest, save_corpus, standardize)

logger = logging.getLogger("pmuge")


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# name -> (type, default, help); default None means required
REQUIRED = None
COMMANDS: dict[str, dict] = {
    "toygen": {
        "out": (str, REQUIRED, "output corpus directory"),
        "voltage": (int, 7, "number of voltage events"),
        "frequency": (int, 1, "number of frequency events"),
        "n_pmus": (int, 60, "PMUs per event"),
        "n_samples": (int, 600, "samples per event"),
        "noise": (float, 0.05, "colored-noise level"),
        "event_start": (int, 300, "onset sample"),
        "start_jitter": (int, 0, "max shift of the event start, in samples"),
        "n_modes": (int, 3, "mixture modes of the PMU participation"),
    },
    "decompose": {
        "corpus": (str, REQUIRED, "corpus directory with manifest.tsv"),
        "out": (str, REQUIRED, "output directory"),
        "sample_per_event": (int, 20, "PMUs sampled per event for the shared basis"),
        "n_boot": (int, 5000, "bootstrap replicates"),
        "resample": (int, 2000, "PMUs drawn per bootstrap replicate"),
        "l1_penalty": (float, 0.1, "relative soft threshold of the sparse stage"),
        "sparse_iters": (int, 5000, "iteration cap of the sparse stage"),
        "sparse_tol": (float, 1e-8, "convergence tolerance of the sparse stage"),
    },
    "train": {
        "decomp": (str, REQUIRED, "directory written by decompose"),
        "out": (str, REQUIRED, "output directory"),
        "epochs": (int, 500, ""),
        "batch_size": (int, 50, ""),
        "lr_gen": (float, 1e-3, "generator learning rate"),
        "lr_disc": (float, 1e-5, "discriminator learning rate"),
        "weight_decay": (float, 0.25, "L2 coefficient"),
        "checkpoint_every": (int, 25, "epochs between checkpoints"),
        "H": (int, 1000, "hidden features per extractor"),
        "C": (int, 3, "mixture modes"),
        "n_pmus": (int, 0, "PMUs per event in training; 0 = smallest in the corpus"),
        "depth": (int, 3, "cascade depth"),
        "n_blocks": (int, 10, "ResNext blocks"),
        "temperature": (float, 1.0, "Gumbel-softmax temperature"),
        "dq": (float, 0.04, "quantile step"),
    },
    "simulate-inter": {
        "decomp": (str, REQUIRED, "directory written by decompose"),
        "out": (str, REQUIRED, "output directory"),
        "n_events": (int, 0, "simulated events; 0 = as many as measured"),
    },
    "generate": {
        "corpus": (str, REQUIRED, "measured corpus directory (labels, PMU ids)"),
        "decomp": (str, REQUIRED, "directory written by decompose"),
        "checkpoint": (str, REQUIRED, "generator checkpoint"),
        "inter_model": (str, REQUIRED, "label models written by simulate-inter"),
        "out": (str, REQUIRED, "output corpus directory"),
    },
    "evaluate": {
        "synthetic": (str, REQUIRED, "synthetic corpus directory"),
        "measured": (str, REQUIRED, "measured corpus directory"),
        "out": (str, REQUIRED, "output directory"),
        "classifier_epochs": (int, 200, "0 skips the classifier scores"),
        "classifier_batch": (int, 50, ""),
        "classifier_width": (int, 16, "channels after the input projection"),
        "classifier_H": (int, 32, "classifier hidden features"),
        "classifier_blocks": (int, 2, "classifier ResNext blocks"),
    },
}
for _spec in COMMANDS.values():
    _spec["seed"] = (int, REQUIRED, "random seed")


def read_config_file(path) -> dict[str, str]:
    out = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def resolve(command: str, flags: dict, config_file=None) -> dict:
    spec = COMMANDS[command]
    raw = {}
    if config_file:
        raw.update(read_config_file(config_file))
    raw.update({k: v for k, v in flags.items() if v is not None})
    unknown = sorted(set(raw) - set(spec))
    if unknown:
        raise ConfigError(f"unknown config key(s) for {command}: {', '.join(unknown)}")
    out = {}
    for key, (typ, default, _) in spec.items():
        if key in raw:
            try:
                out[key] = _bool(raw[key]) if typ is bool else typ(raw[key])
            except ValueError as e:
                raise ConfigError(f"bad value for {key}: {raw[key]!r}") from e
        elif default is REQUIRED:
            raise ConfigError(f"--{key.replace('_', '-')} is required")
        else:
            out[key] = default
    return out


def write_resolved(cfg: dict, out_dir, command: str):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"# {command}"] + [f"{k}={cfg[k]!r}" if isinstance(cfg[k], float) else f"{k}={cfg[k]}"
                                for k in sorted(cfg)]
    (out / "resolved_config.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _load_corpus(path, std: bool = True):
    manifest = read_manifest(Path(path) / "manifest.tsv")
    records = manifest.load()
    return [standardize(r) for r in records] if std else records


def _decomp_files(path) -> list[Path]:
    d = Path(path) / "decomp"
    files = sorted(d.glob("*.pmue"))
    if not files:
        raise FileNotFoundError(f"no decompositions under {d}")
    return files


# -------------------------------------------------------------- commands


def cmd_toygen(cfg: dict) -> int:
    toy = ToyConfig(voltage=cfg["voltage"], frequency=cfg["frequency"], n_pmus=cfg["n_pmus"],
                    n_samples=cfg["n_samples"], noise=cfg["noise"],
                    event_start=cfg["event_start"],
                    start_jitter=cfg["start_jitter"], n_modes=cfg["n_modes"])
    toy.validate()
    manifest = generate_toy_corpus(toy, cfg["seed"], cfg["out"])
    write_resolved(cfg, cfg["out"], "toygen")
    print(f"wrote {len(manifest.records)} events to {cfg['out']}")
    return 0


def cmd_decompose(cfg: dict) -> int:
    from .epdecomp import (N_SIGNATURES, DecomposeConfig, bootstrap_explained_variance,
                           decompose_event, fit_inter_event_basis, save_basis, save_decomposition)
    out = Path(cfg["out"])
    records = _load_corpus(cfg["corpus"])
    usable = []
    for r in records:
        if r.n_pmus < N_SIGNATURES:
            print(f"warning: event {r.event_id} has {r.n_pmus} PMUs (< {N_SIGNATURES}); skipped",
                  file=sys.stderr)
        else:
            usable.append(r)
    if not usable:
        raise ConfigError("no event has enough PMUs to decompose")
    seed_basis, seed_boot = np.random.SeedSequence(cfg["seed"]).spawn(2)
    basis = fit_inter_event_basis(usable, cfg["sample_per_event"],
                                  seed=int(seed_basis.generate_state(1)[0]))
    (out / "decomp").mkdir(parents=True, exist_ok=True)
    save_basis(basis, out / "basis.pmue")
    dcfg = DecomposeConfig(cfg["l1_penalty"], cfg["sparse_iters"], cfg["sparse_tol"])
    rel = []
    lines = ["event_id\tchannel\tnorm\tafter_inter\tafter_sparse\tafter_svd\trelative"]
    for r in usable:
        d = decompose_event(r, basis, dcfg)
        save_decomposition(d, out / "decomp" / f"{r.event_id}.pmue", {"label": r.label.value})
        rr = d.relative_residual()
        rel.extend(rr)
        for c, name in enumerate("PQVF"):
            vals = "\t".join(repr(float(v)) for v in d.residuals[c])
            lines.append(f"{r.event_id}\t{name}\t{vals}\t{float(rr[c])!r}")
    (out / "residuals.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")

    table = bootstrap_explained_variance(usable, cfg["n_boot"], cfg["resample"],
                                         seed=int(seed_boot.generate_state(1)[0]))
    table.to_csv(out / "bootstrap.csv")
    # signature curves of the shared basis, one column per (channel, component)
    B = basis.basis.data
    head = ["sample"] + [f"{ch}{j}" for ch in "PQVF" for j in range(B.shape[1])]
    rows = ["\t".join(head)]
    for t in range(B.shape[2]):
        rows.append("\t".join([str(t)] + [repr(float(B[c, j, t])) for c in range(4)
                                          for j in range(B.shape[1])]))
    (out / "basis_signatures.tsv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    ratio = basis.explained_variance_ratio
    (out / "basis_ratio.tsv").write_text(
        "channel\t" + "\t".join(f"c{j}" for j in range(ratio.shape[1])) + "\n"
        + "".join(f"{ch}\t" + "\t".join(repr(float(v)) for v in ratio[c]) + "\n"
                  for c, ch in enumerate("PQVF")), encoding="utf-8")
    write_resolved(cfg, out, "decompose")
    print(f"decomposed {len(usable)} events; mean relative residual {float(np.mean(rel)):.6g}")
    return 0


def _load_decomps(path):
    from .epdecomp import load_decomposition
    return [load_decomposition(f)[0] for f in _decomp_files(path)]


def cmd_train(cfg: dict) -> int:
    from .model import ArchConfig
    from .training import TrainConfig, TrainingDiverged, make_examples, train
    decomps = _load_decomps(cfg["decomp"])
    n_pmus = cfg["n_pmus"] or min(d.n_pmus for d in decomps)
    S, T = decomps[0].signatures.dims[1:]
    arch = ArchConfig(S=S, T=T, H=cfg["H"], C=cfg["C"], N=n_pmus, depth=cfg["depth"],
                      n_blocks=cfg["n_blocks"], temperature=cfg["temperature"])
    tcfg = TrainConfig(cfg["epochs"], cfg["batch_size"], cfg["lr_gen"], cfg["lr_disc"],
                       cfg["weight_decay"], cfg["checkpoint_every"], cfg["dq"])
    write_resolved(cfg, cfg["out"], "train")
    try:
        res = train(make_examples(decomps), arch, tcfg, cfg["seed"], cfg["out"])
    except TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    last = res.history[-1]
    print(f"trained {len(res.history)} epochs; final total_g {last.total_g:.6g}; "
          f"checkpoint {res.checkpoints[-1]}")
    return 0


def cmd_simulate_inter(cfg: dict) -> int:
    from .epdecomp import N_INTER, load_decomposition
    from .intersim import (fit_label_models, ks_two_sample, model_coordinates, sample_coordinates,
                           sample_inter_factors, save_label_models, sort_factors)
    loaded = [load_decomposition(f) for f in _decomp_files(cfg["decomp"])]
    decomps = [d for d, _ in loaded]
    missing = [d.event_id for d, meta in loaded if "label" not in meta]
    if missing:
        raise ConfigError(f"decompositions without an event label: {missing}")
    labels = [meta["label"] for _, meta in loaded]
    models = fit_label_models(decomps, labels, N_INTER)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    save_label_models(models, out / "inter_model.pmue", {"n_events": len(decomps)})
    lines = ["label\tsignature\tchannel\tquantity\tks_statistic\tp_value\texplained_ratio"]
    seeds = np.random.SeedSequence(cfg["seed"]).spawn(len(models))
    for (lab, model), ss in zip(models.items(), seeds):
        mine = [d for d, x in zip(decomps, labels) if Label(x) is lab]
        sf = sort_factors(mine, N_INTER)
        n = cfg["n_events"] or len(sf.event_ids)
        s_coord, s_prof = ss.spawn(2)
        real = model_coordinates(model, sf)
        sim = sample_coordinates(model, n, int(s_coord.generate_state(1)[0]))
        prof = sample_inter_factors(model, n, int(s_prof.generate_state(1)[0]))
        for k in range(model.k):
            for c, ch in enumerate("PQVF"):
                d, p = ks_two_sample(real[:, k, c], sim[:, k, c])
                lines.append(f"{lab.value}\t{k}\t{ch}\tcoordinate\t{d!r}\t{p!r}\t"
                             f"{float(model.explained_ratio[k, c])!r}")
        for c, ch in enumerate("PQVF"):
            d, p = ks_two_sample(sf.data[:, :, c].ravel(), prof[:, :, c].ravel())
            lines.append(f"{lab.value}\tall\t{ch}\tsorted_factor\t{d!r}\t{p!r}\t")
        print(f"{lab.value}: {len(sf.event_ids)} events (N_sort={model.n_sort}); "
              f"mean explained ratio {float(model.explained_ratio.mean()):.4f}")
    (out / "ks_report.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    write_resolved(cfg, out, "simulate-inter")
    return 0


def cmd_generate(cfg: dict) -> int:
    from .intersim import load_label_models
    from .synth import synthesize
    from .training import load_checkpoint
    for key in ("checkpoint", "inter_model"):
        if not Path(cfg[key]).exists():
            raise FileNotFoundError(f"{key} file {cfg[key]} does not exist")
    gen, _, _ = load_checkpoint(cfg["checkpoint"])
    models = load_label_models(cfg["inter_model"])
    # standardized so the PMU ids match the decompositions
    measured = {r.event_id: r for r in _load_corpus(cfg["corpus"])}
    decomps = _load_decomps(cfg["decomp"])
    seeds = np.random.SeedSequence(cfg["seed"]).spawn(len(decomps))
    out = []
    for d, ss in zip(decomps, seeds):
        if d.event_id not in measured:
            raise ConfigError(f"decomposition {d.event_id} has no event in the corpus")
        r = measured[d.event_id]
        if r.label not in models:
            raise ConfigError(f"no inter-event model for label {r.label.value}")
        out.append(synthesize(d, r, gen, models, int(ss.generate_state(1)[0])))
    save_corpus(out, cfg["out"])
    write_resolved(cfg, cfg["out"], "generate")
    print(f"wrote {len(out)} synthetic events to {cfg['out']}")
    return 0


def cmd_evaluate(cfg: dict) -> int:
    from .evalsuite import (ClassifierConfig, EvalReport, event_similarity, inception_grid,
                            pmu_similarity)
    syn = _load_corpus(cfg["synthetic"], std=False)
    mea = _load_corpus(cfg["measured"])
    report = EvalReport(event_similarity(syn, mea), pmu_similarity(syn, mea))
    if cfg["classifier_epochs"] > 0:
        ccfg = ClassifierConfig(width=cfg["classifier_width"], T=mea[0].n_samples,
                                H=cfg["classifier_H"], n_blocks=cfg["classifier_blocks"],
                                epochs=cfg["classifier_epochs"], batch_size=cfg["classifier_batch"])
        report.inception = inception_grid(syn, mea, ccfg, cfg["seed"])
    path = report.write(cfg["out"])
    write_resolved(cfg, cfg["out"], "evaluate")
    print(f"max event corr {report.event.max:.4f}, max PMU corr {report.pmu.max:.4f}")
    if not report.privacy_ok:
        print("PRIVACY FAILURE: correlation above threshold", file=sys.stderr)
    print(f"report: {path}")
    return 0


HANDLERS = {"toygen": cmd_toygen, "decompose": cmd_decompose, "train": cmd_train,
            "simulate-inter": cmd_simulate_inter, "generate": cmd_generate,
            "evaluate": cmd_evaluate}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pmuge", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, spec in COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="key=value settings file")
        for key, (_, default, help_) in spec.items():
            suffix = " (required)" if default is REQUIRED else f" (default {default})"
            p.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None,
                           help=(help_ + suffix).strip())
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
    try:
        cfg = resolve(args.command, flags, args.config)
        return HANDLERS[args.command](cfg)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (FileNotFoundError, DataFormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
