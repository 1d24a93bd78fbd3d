"""Command-line entry point: world generation, pretraining, training, evaluation, speaker dumps, ablations."""
from __future__ import annotations

import argparse
import json
import logging
import subprocess
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from foam import __version__
from foam import autodiff as ad
from foam import speaker as spk
from foam import trainer as tr
from foam.data import (VOCAB_FILE, WORLD_FILE, Corpus, build_corpus, dataset_file, file_hashes,
                       load_corpus, routes_file, write_corpus)
from foam.errors import ConfigError, DataError, FoamError
from foam.follower import FollowerConfig
from foam.metrics import EvalResult, corpus_bleu, length_histogram
from foam.rng import stream
from foam.speaker import RouteItem, SpeakerConfig
from foam.trainer import MODES, TrainConfig
from foam.world import SPLITS, Route, WorldConfig, check_route, read_routes

log = logging.getLogger("foam")

# ---------------------------------------------------------------- configuration

WORLD_DEFAULTS = {"world.counts": "10/2/2", "world.routes_per_env": 50,
                  "world.route_min": 3, "world.route_max": 8}
for _f in fields(WorldConfig):
    WORLD_DEFAULTS[f"world.{_f.name}"] = _f.default
TRAIN_DEFAULTS = {f"train.{f.name}": f.default for f in fields(TrainConfig) if f.name != "seed"}
DEFAULTS = {"seed": 0, **WORLD_DEFAULTS, **TRAIN_DEFAULTS}


def parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def load_config_file(path) -> dict:
    try:
        with open(path) as fh:
            conf = json.load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON ({e})") from None
    if not isinstance(conf, dict):
        raise ConfigError(f"{path}: expected a flat object of dotted keys")
    for k, v in conf.items():
        if isinstance(v, (dict, list)):
            raise ConfigError(f"{path}: key {k!r} is nested; use flat dotted keys")
    return conf


def effective_config(args, flag_keys: dict) -> dict:
    """built-in default < config file < --set < dedicated flags."""
    conf = dict(DEFAULTS)
    layers = [load_config_file(args.config)] if getattr(args, "config", None) else []
    sets = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        sets[k.strip()] = parse_value(v)
    layers.append(sets)
    layers.append({key: getattr(args, attr) for attr, key in flag_keys.items()
                   if getattr(args, attr, None) is not None})
    for layer in layers:
        for k, v in layer.items():
            if k not in DEFAULTS:
                raise ConfigError(f"unknown config key {k!r}")
            conf[k] = v
    return dict(sorted(conf.items()))


def parse_counts(v) -> tuple[int, ...]:
    try:
        counts = tuple(int(x) for x in str(v).split("/"))
    except ValueError:
        raise ConfigError(f"counts must look like 10/2/2, got {v!r}") from None
    if len(counts) != len(SPLITS):
        raise ConfigError(f"counts needs {len(SPLITS)} values (train/val_seen/val_unseen)")
    return counts


def world_config(conf: dict) -> WorldConfig:
    kw = {}
    for f in fields(WorldConfig):
        try:
            kw[f.name] = type(f.default)(conf[f"world.{f.name}"])
        except (TypeError, ValueError):
            raise ConfigError(f"bad value for world.{f.name}") from None
    return WorldConfig(**kw)


def train_config(conf: dict) -> TrainConfig:
    d = {k[len("train."):]: v for k, v in conf.items() if k.startswith("train.")}
    d["seed"] = conf["seed"]
    return TrainConfig.from_dict(d)


# ---------------------------------------------------------------- run artifacts

def version_string() -> str:
    try:
        out = subprocess.run(["git", "describe", "--tags", "--always", "--dirty"],
                             cwd=Path(__file__).parent, capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}-{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def world_files(world: Path) -> list[str]:
    names = [WORLD_FILE, VOCAB_FILE] + [dataset_file(s) for s in SPLITS] + [routes_file(s) for s in SPLITS]
    return [n for n in names if (world / n).exists()]


@dataclass
class RunManifest:
    config: dict
    world: str
    world_hashes: dict
    seed: int
    mode: str
    command: str
    version: str = field(default_factory=version_string)
    started: str = ""
    finished: str = ""
    wall_seconds: float = 0.0

    def write(self, run: Path) -> None:
        (run / "manifest.json").write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, run: Path) -> "RunManifest":
        p = Path(run) / "manifest.json"
        if not p.exists():
            raise DataError(f"{run}: no manifest.json")
        return cls(**json.loads(p.read_text()))

    def verify(self, world: Path) -> None:
        """Recompute world/dataset hashes and refuse to continue on any change."""
        missing = [n for n in self.world_hashes if not (Path(world) / n).exists()]
        if missing or file_hashes(world, list(self.world_hashes)) != self.world_hashes:
            raise DataError(f"world files under {world} changed since the run started")


def now_iso() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def prepare_dir(path: Path, force: bool) -> Path:
    path = Path(path)
    if path.exists() and any(path.iterdir()) and not force:
        raise ConfigError(f"{path} exists and is not empty (use --force to overwrite)")
    path.mkdir(parents=True, exist_ok=True)
    return path


def model_meta(kind: str, cfg, corpus: Corpus, **extra) -> dict:
    return {"kind": kind, "model": asdict(cfg), "vocab": list(corpus.vocab.tokens), **extra}


def save_model(path: Path, params, kind: str, cfg, corpus: Corpus, **extra) -> None:
    ad.save_checkpoint(path, params, model_meta(kind, cfg, corpus, **extra))


def load_model(path, kind: str, corpus: Corpus):
    params, meta = ad.load_checkpoint(path)
    if meta.get("kind") != kind:
        raise DataError(f"{path}: expected a {kind} checkpoint, found {meta.get('kind')!r}")
    if meta.get("vocab") != list(corpus.vocab.tokens):
        raise DataError(f"{path}: checkpoint vocabulary does not match the world vocabulary")
    model = dict(meta["model"])
    if kind == "follower":
        cfg = FollowerConfig(**model)
    else:
        model["banned"] = tuple(model["banned"])
        cfg = SpeakerConfig(**model)
    if cfg.feature_dim != corpus.feature_dim:
        raise DataError(f"{path}: feature dim {cfg.feature_dim} != world feature dim {corpus.feature_dim}")
    return cfg, params


def ckpt_name(step: int, kind: str) -> str:
    return f"step_{step:06d}.{kind}.ckpt"


def latest_step(run: Path) -> int:
    steps = sorted(int(p.name[5:11]) for p in (run / "checkpoints").glob("step_*.follower.ckpt")
                   if (run / "checkpoints" / ckpt_name(int(p.name[5:11]), "speaker")).exists())
    if not steps:
        raise DataError(f"{run}: no complete checkpoint to resume from")
    return steps[-1]


class JsonlLog:
    def __init__(self, path: Path):
        self.path = path

    def truncate_after(self, step: int) -> None:
        if not self.path.exists():
            return
        keep = [ln for ln in self.path.read_text().splitlines() if ln and json.loads(ln)["step"] <= step]
        self.path.write_text("".join(ln + "\n" for ln in keep))

    def __call__(self, rec: dict) -> None:
        with open(self.path, "a") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def resolve_world(args) -> Path:
    world = Path(args.world)
    if not (world / WORLD_FILE).exists():
        raise DataError(f"{world}: not a world directory (no {WORLD_FILE})")
    return world


# ---------------------------------------------------------------- commands

def cmd_gen_world(args) -> int:
    conf = effective_config(args, {"seed": "seed", "counts": "world.counts", "grid": "world.grid",
                                   "routes_per_env": "world.routes_per_env"})
    out = prepare_dir(Path(args.out), args.force)
    wcfg = world_config(conf)
    corpus = build_corpus(int(conf["seed"]), parse_counts(conf["world.counts"]),
                          int(conf["world.routes_per_env"]), wcfg,
                          (int(conf["world.route_min"]), int(conf["world.route_max"])), jobs=args.jobs)
    write_corpus(out, corpus)
    (out / "world_config.json").write_text(json.dumps(conf, indent=2, sort_keys=True) + "\n")
    for split in SPLITS:
        print(f"{split}: {len(corpus.split_envs(split))} environments, "
              f"{len(corpus.examples[split])} instructions")
    return 0


def _pretrain_both(cfg: TrainConfig, corpus: Corpus, run: Path, which=("follower", "speaker")):
    fcfg, scfg = tr.model_configs(cfg, corpus)
    f0, s0 = tr.init_models(cfg, corpus)
    logf = JsonlLog(run / "pretrain.jsonl")
    out = {"follower": f0, "speaker": s0}
    for w in which:
        res = tr.pretrain(cfg, corpus, w, log_fn=logf)
        out[w] = res.params
        log.info("pretrained %s, best step %d", w, res.best_step)
    return fcfg, scfg, out["follower"], out["speaker"]


def cmd_pretrain(args) -> int:
    conf = effective_config(args, {"seed": "seed", "steps": "train.pretrain_steps"})
    cfg = train_config(conf).validate()
    world = resolve_world(args)
    run = prepare_dir(Path(args.run), args.force)
    corpus = load_corpus(world)
    manifest = RunManifest(conf, str(world), file_hashes(world, world_files(world)), cfg.seed,
                           f"pretrain-{args.which}", "pretrain", started=now_iso())
    (run / "config.json").write_text(json.dumps(conf, indent=2, sort_keys=True) + "\n")
    manifest.write(run)
    t0 = time.time()
    which = ("follower", "speaker") if args.which == "both" else (args.which,)
    fcfg, scfg, f, s = _pretrain_both(cfg, corpus, run, which)
    if "follower" in which:
        save_model(run / "follower.ckpt", f, "follower", fcfg, corpus, step=cfg.pretrain_steps)
    if "speaker" in which:
        save_model(run / "speaker.ckpt", s, "speaker", scfg, corpus, step=cfg.pretrain_steps)
    manifest.finished, manifest.wall_seconds = now_iso(), round(time.time() - t0, 3)
    manifest.write(run)
    return 0


TRAIN_FLAGS = {"seed": "seed", "steps": "train.total_steps", "pretrain_steps": "train.pretrain_steps",
               "eta_f": "train.eta_f", "eta_s": "train.eta_s"}


def _train_conf(args) -> dict:
    conf = effective_config(args, TRAIN_FLAGS)
    if args.no_recon:
        conf["train.recon"] = False
    if args.no_bilevel:
        conf["train.bilevel"] = False
    return conf


def cmd_train(args) -> int:
    run = Path(args.run)
    world = resolve_world(args)
    if args.resume:
        manifest = RunManifest.load(run)
        manifest.verify(world)
        conf, mode = manifest.config, manifest.mode
        cfg = train_config(conf).validate(mode)
    else:
        conf, mode = _train_conf(args), args.mode
        cfg = train_config(conf).validate(mode)
        prepare_dir(run, args.force)
        manifest = RunManifest(conf, str(world), file_hashes(world, world_files(world)), cfg.seed,
                               mode, "train", started=now_iso())
        (run / "config.json").write_text(json.dumps(conf, indent=2, sort_keys=True) + "\n")
        manifest.write(run)
    corpus = load_corpus(world)
    ckdir = run / "checkpoints"
    ckdir.mkdir(exist_ok=True)
    steps_log, metrics_log = JsonlLog(run / "steps.jsonl"), JsonlLog(run / "metrics.jsonl")
    t0 = time.time()
    if args.resume:
        start = latest_step(run)
        fcfg, f = load_model(ckdir / ckpt_name(start, "follower"), "follower", corpus)
        scfg, s = load_model(ckdir / ckpt_name(start, "speaker"), "speaker", corpus)
        # the reward baseline is optimizer state; it rides along in the speaker checkpoint
        baseline = ad.load_checkpoint(ckdir / ckpt_name(start, "speaker"))[1].get("baseline")
        steps_log.truncate_after(start)
        metrics_log.truncate_after(start)
        log.info("resuming %s at step %d", run, start)
    else:
        start, baseline = 0, None
        if args.init_follower or args.init_speaker:
            if not (args.init_follower and args.init_speaker):
                raise ConfigError("--init-follower and --init-speaker go together")
            fcfg, f = load_model(args.init_follower, "follower", corpus)
            scfg, s = load_model(args.init_speaker, "speaker", corpus)
        else:
            fcfg, scfg, f, s = _pretrain_both(cfg, corpus, run)
        save_model(ckdir / ckpt_name(0, "follower"), f, "follower", fcfg, corpus, step=0)
        save_model(ckdir / ckpt_name(0, "speaker"), s, "speaker", scfg, corpus, step=0)

    def on_checkpoint(state: tr.TrainState) -> None:
        save_model(ckdir / ckpt_name(state.step, "follower"), state.theta_f, "follower", fcfg, corpus,
                   step=state.step)
        save_model(ckdir / ckpt_name(state.step, "speaker"), state.theta_s, "speaker", scfg, corpus,
                   step=state.step, baseline=state.baseline)

    state = tr.train(cfg, corpus, mode, f, s, start, on_report=steps_log, on_metrics=metrics_log,
                     on_checkpoint=on_checkpoint, end_step=args.stop_at, baseline=baseline)
    manifest.finished = now_iso()
    manifest.wall_seconds = round(manifest.wall_seconds + time.time() - t0, 3)
    manifest.write(run)
    print(f"{mode}: stopped at step {state.step} of {cfg.total_steps - cfg.pretrain_steps}")
    return 0


def _eval_chunk(job):
    fcfg, f, scfg, s, corpus, split, exs, beam = job
    sub = Corpus(corpus.envs, {split: exs}, corpus.vocab)
    res, preds = tr.evaluate(fcfg, f, sub, split, beam=beam, scfg=scfg, theta_s=s)
    return res.episodes, preds


def evaluate_split(fcfg, f, corpus, split, limit=None, beam=None, scfg=None, s=None, jobs=1):
    """Evaluation with rollouts optionally spread over worker processes; order is preserved."""
    if split not in SPLITS:
        raise DataError(f"unknown split {split!r}; expected one of {SPLITS}")
    exs = corpus.examples[split][:limit] if limit else corpus.examples[split]
    n = max(1, min(jobs, len(exs)))
    chunks = [exs[i * len(exs) // n:(i + 1) * len(exs) // n] for i in range(n)]
    jobs_in = [(fcfg, f, scfg, s, corpus, split, c, beam) for c in chunks]
    if n > 1:
        with ProcessPoolExecutor(n) as ex:
            parts = list(ex.map(_eval_chunk, jobs_in))
    else:
        parts = [_eval_chunk(jobs_in[0])]
    res = EvalResult(split)
    preds = []
    for eps, ps in parts:
        res.episodes += eps
        preds += ps
    return res, preds


def _models_from_args(args, corpus, need_speaker: bool):
    if args.run:
        ck = Path(args.run) / "checkpoints"
        step = latest_step(Path(args.run))
        fpath, spath = ck / ckpt_name(step, "follower"), ck / ckpt_name(step, "speaker")
    else:
        fpath, spath = args.follower, args.speaker
    if fpath is None:
        raise ConfigError("give --run or --follower")
    fcfg, f = load_model(fpath, "follower", corpus)
    scfg = s = None
    if need_speaker:
        if spath is None:
            raise ConfigError("beam evaluation needs a speaker (--speaker or --run)")
        scfg, s = load_model(spath, "speaker", corpus)
    return fcfg, f, scfg, s


def cmd_evaluate(args) -> int:
    world = resolve_world(args)
    corpus = load_corpus(world)
    splits = list(SPLITS[1:]) if args.split == "all" else [args.split]
    for sp in splits:
        if sp not in SPLITS:
            raise DataError(f"unknown split {sp!r}; expected one of {SPLITS} or 'all'")
    fcfg, f, scfg, s = _models_from_args(args, corpus, args.beam is not None)
    report = {"beam": args.beam, "splits": {}}
    for sp in splits:
        res, preds = evaluate_split(fcfg, f, corpus, sp, args.limit, args.beam, scfg, s, args.jobs)
        extra = [{"env_id": p.env_id, "predicted": list(p.nodes)} for p in preds]
        report["splits"][sp] = res.to_dict(extra)
        sm = res.summary()
        print(f"{sp}: SR {sm['sr']:.1f} SPL {sm['spl']:.1f} NE {sm['ne']:.2f} "
              f"nDTW {sm['ndtw']:.1f} sDTW {sm['sdtw']:.1f} ({sm['episodes']} episodes)")
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    return 0


def _route_items(corpus: Corpus, routes: list[Route]) -> list[RouteItem]:
    items = []
    for r in routes:
        env = corpus.env(r.env_id)
        check_route(env, r)
        items.append(RouteItem(env, r))
    return items


def generate_dump(scfg, s, corpus, routes, mode="greedy", seed=0, temperature=1.0,
                  batch_size=64) -> list[dict]:
    rng = stream(seed, "speak") if mode == "sample" else None
    out = []
    for lo in range(0, len(routes), batch_size):
        items = _route_items(corpus, routes[lo:lo + batch_size])
        for smp in spk.generate(scfg, s, items, mode, rng, temperature):
            out.append({"route": smp.route.to_dict(), "instruction": list(smp.instruction),
                        "words": corpus.vocab.decode(smp.instruction), "logprob": smp.logprob})
    return out


def cmd_speak(args) -> int:
    world = resolve_world(args)
    corpus = load_corpus(world)
    scfg, s = load_model(args.speaker, "speaker", corpus)
    path = Path(args.routes) if args.routes else world / routes_file(args.split)
    if not path.exists():
        raise DataError(f"{path}: no such route file")
    routes = read_routes(path)
    dump = generate_dump(scfg, s, corpus, routes, args.mode, args.seed, args.temperature)
    text = "".join(json.dumps(d, sort_keys=True) + "\n" for d in dump)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def references_by_route(corpus: Corpus, split: str) -> dict:
    refs: dict = {}
    for ex in corpus.examples[split]:
        refs.setdefault(ex.route, []).append(list(ex.instruction))
    return refs


def read_hypotheses(path) -> list[tuple[Route, list]]:
    out = []
    with open(path) as fh:
        for i, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                out.append((Route.from_dict(d["route"]), list(d["instruction"])))
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise DataError(f"{path}:{i}: bad hypothesis record ({e})") from None
    return out


def compare_instructions(corpus: Corpus, split: str, hyps: list[tuple[Route, list]],
                         bucket_width: int = 1, smooth: bool = False) -> dict:
    """BLEU against every oracle annotation of the route, plus the length-difference histogram
    against its first annotation."""
    refs = references_by_route(corpus, split)
    R, H = [], []
    for route, ins in hyps:
        if route not in refs:
            raise DataError(f"route {route.env_id}:{list(route.nodes)} has no reference in {split}")
        R.append(refs[route])
        H.append(ins)
    hist = length_histogram([r[0] for r in R], H, bucket_width)
    return {"split": split, "count": len(H), "bleu": corpus_bleu(R, H, smooth=smooth),
            "histogram": [list(p) for p in hist.pairs()], "bucket_width": bucket_width}


def cmd_compare(args) -> int:
    world = resolve_world(args)
    corpus = load_corpus(world)
    if args.hypotheses:
        hyps = read_hypotheses(args.hypotheses)
    elif args.speaker:
        scfg, s = load_model(args.speaker, "speaker", corpus)
        routes = list(references_by_route(corpus, args.split))
        hyps = [(Route.from_dict(d["route"]), d["instruction"])
                for d in generate_dump(scfg, s, corpus, routes, "greedy")]
    else:
        raise ConfigError("give --speaker or --hypotheses")
    rep = compare_instructions(corpus, args.split, hyps, args.bucket_width, args.smooth)
    print(f"{args.split}: BLEU {rep['bleu']:.2f} over {rep['count']} instructions")
    for b, c in rep["histogram"]:
        print(f"  {b:+d}\t{c}")
    if args.out:
        Path(args.out).write_text(json.dumps(rep, indent=1, sort_keys=True) + "\n")
    return 0


ABLATION_ROWS = (("full", {}), ("-Recon.", {"recon": False}), ("-Bi-level", {"bilevel": False}))


def h_stats(hs: list[float]) -> dict:
    a = np.asarray(hs, dtype=np.float64)
    if a.size == 0:
        return {"n": 0}
    return {"n": int(a.size), "mean": float(a.mean()), "std": float(a.std()), "min": float(a.min()),
            "max": float(a.max()), "positive": float((a > 0).mean())}


def mean_std(xs: list[float]) -> tuple[float, float]:
    a = np.asarray(xs, dtype=np.float64)
    return float(a.mean()), float(a.std(ddof=1)) if a.size > 1 else 0.0


def run_ablation(conf: dict, corpus: Corpus, seeds: list[int], out: Path, init=None,
                 eval_limit: "int | None" = None) -> dict:
    results = {name: [] for name, _ in ABLATION_ROWS}
    for seed in seeds:
        base = replace(train_config(conf), seed=seed)
        if init is not None:
            f, s = init
        else:
            pre = out / f"pretrain_seed{seed}"
            pre.mkdir(parents=True, exist_ok=True)
            _, _, f, s = _pretrain_both(base, corpus, pre)
        for name, over in ABLATION_ROWS:
            cfg = replace(base, **over).validate("foam")
            rdir = out / name / f"seed{seed}"
            rdir.mkdir(parents=True, exist_ok=True)
            (rdir / "steps.jsonl").unlink(missing_ok=True)
            steps_log, hs = JsonlLog(rdir / "steps.jsonl"), []

            def on_report(rec, steps_log=steps_log, hs=hs):
                steps_log(rec)
                hs.append(rec["reward"])

            state = tr.train(cfg, corpus, "foam", f, s, on_report=on_report)
            fcfg, _ = tr.model_configs(cfg, corpus)
            res, _ = tr.evaluate(fcfg, state.theta_f, corpus, "val_unseen", eval_limit)
            results[name].append({"seed": seed, **res.summary(), "h": h_stats(hs)})
            log.info("ablation %s seed %d: SR %.1f", name, seed, res.summary()["sr"])
    table = []
    for name, _ in ABLATION_ROWS:
        row = {"row": name}
        for k in ("sr", "spl", "ndtw", "sdtw", "ne"):
            row[k], row[f"{k}_std"] = mean_std([r[k] for r in results[name]])
        row["h_mean"], row["h_mean_std"] = mean_std([r["h"]["mean"] for r in results[name]])
        table.append(row)
    return {"seeds": seeds, "runs": results, "table": table}


def format_ablation(rep: dict) -> str:
    lines = [f"{'row':<10} {'SR':>13} {'SPL':>13} {'nDTW':>13} {'h mean':>15}"]
    for r in rep["table"]:
        lines.append(f"{r['row']:<10} {r['sr']:6.1f}±{r['sr_std']:<5.1f} {r['spl']:6.1f}±{r['spl_std']:<5.1f} "
                     f"{r['ndtw']:6.1f}±{r['ndtw_std']:<5.1f} {r['h_mean']:+7.3f}±{r['h_mean_std']:.3f}")
    lines.append("")
    lines.append("per-run h statistics (mean, std, min, max, fraction positive):")
    for name, runs in rep["runs"].items():
        for r in runs:
            h = r["h"]
            lines.append(f"  {name:<10} seed {r['seed']}: SR {r['sr']:.1f}  h {h['mean']:+.4f} "
                         f"{h['std']:.4f} {h['min']:+.4f} {h['max']:+.4f} {h['positive']:.2f}")
    return "\n".join(lines) + "\n"


def cmd_ablate(args) -> int:
    conf = effective_config(args, TRAIN_FLAGS)
    train_config(conf).validate("foam")
    world = resolve_world(args)
    corpus = load_corpus(world)
    out = prepare_dir(Path(args.out), args.force)
    try:
        seeds = [int(x) for x in args.seeds.split(",")]
    except ValueError:
        raise ConfigError(f"--seeds must be comma-separated integers, got {args.seeds!r}") from None
    init = None
    if args.init_follower or args.init_speaker:
        if not (args.init_follower and args.init_speaker):
            raise ConfigError("--init-follower and --init-speaker go together")
        init = (load_model(args.init_follower, "follower", corpus)[1],
                load_model(args.init_speaker, "speaker", corpus)[1])
    manifest = RunManifest(conf, str(world), file_hashes(world, world_files(world)), int(conf["seed"]),
                           "ablate", "ablate", started=now_iso())
    manifest.write(out)
    t0 = time.time()
    rep = run_ablation(conf, corpus, seeds, out, init, args.limit)
    (out / "ablation.json").write_text(json.dumps(rep, indent=1, sort_keys=True) + "\n")
    text = format_ablation(rep)
    (out / "ablation.txt").write_text(text)
    sys.stdout.write(text)
    manifest.finished, manifest.wall_seconds = now_iso(), round(time.time() - t0, 3)
    manifest.write(out)
    return 0


# ---------------------------------------------------------------- argument parsing

def _common(p: argparse.ArgumentParser, world: bool = True) -> None:
    p.add_argument("--config", help="flat JSON config with dotted keys")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--seed", type=int)
    if world:
        p.add_argument("--world", required=True, help="world directory from gen-world")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="foam", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-world", help="generate environments and annotated routes")
    _common(p, world=False)
    p.add_argument("--out", required=True)
    p.add_argument("--counts", help="environments per split, e.g. 10/2/2")
    p.add_argument("--grid", type=int)
    p.add_argument("--routes-per-env", type=int)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_gen_world)

    p = sub.add_parser("pretrain", help="supervised pretraining of follower and/or speaker")
    _common(p)
    p.add_argument("--run", required=True)
    p.add_argument("--which", choices=("follower", "speaker", "both"), default="both")
    p.add_argument("--steps", type=int)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("train", help="back-translation training (foam, envdrop-baseline, supervised-only)")
    _common(p)
    p.add_argument("--run", required=True)
    p.add_argument("--mode", choices=MODES, default="foam")
    p.add_argument("--no-recon", action="store_true")
    p.add_argument("--no-bilevel", action="store_true")
    p.add_argument("--steps", type=int, help="total steps including pretraining")
    p.add_argument("--pretrain-steps", type=int)
    p.add_argument("--eta-f", type=float)
    p.add_argument("--eta-s", type=float)
    p.add_argument("--init-follower")
    p.add_argument("--init-speaker")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--stop-at", type=int, help="checkpoint and exit after this step")
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("evaluate", help="greedy or speaker-rescored beam evaluation")
    p.add_argument("--world", required=True)
    p.add_argument("--run")
    p.add_argument("--follower")
    p.add_argument("--speaker")
    p.add_argument("--split", default="all")
    p.add_argument("--beam", type=int)
    p.add_argument("--limit", type=int)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("speak", help="generate instructions for a route file")
    p.add_argument("--world", required=True)
    p.add_argument("--speaker", required=True)
    p.add_argument("--routes")
    p.add_argument("--split", default="train")
    p.add_argument("--mode", choices=("greedy", "sample"), default="greedy")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_speak)

    p = sub.add_parser("compare", help="BLEU and length histogram against oracle annotations")
    p.add_argument("--world", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--speaker")
    p.add_argument("--hypotheses", help="speak dump or dataset file")
    p.add_argument("--bucket-width", type=int, default=1)
    p.add_argument("--smooth", action="store_true")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_compare)

    p = sub.add_parser("ablate", help="full / -Recon. / -Bi-level grid over seeds")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--steps", type=int)
    p.add_argument("--pretrain-steps", type=int)
    p.add_argument("--eta-f", type=float)
    p.add_argument("--eta-s", type=float)
    p.add_argument("--init-follower")
    p.add_argument("--init-speaker")
    p.add_argument("--limit", type=int, help="evaluate on the first N val-unseen examples")
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_ablate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except FoamError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
