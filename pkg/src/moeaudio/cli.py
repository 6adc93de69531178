"""Command-line entry point: ``moeaudio <subcommand> ...``.

Settings resolve in the order config file < command-line flags < environment.
A config file is JSON (or INI with a ``[config]`` section) whose keys are flag
names with dashes turned into underscores. ``MOEAUDIO_<NAME>`` environment
variables override both, e.g. ``MOEAUDIO_SEED=3``.

Exit codes: 0 success, 1 usage error, 2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .adapter import AdapterConfig, ConfigError
from .checkpoint import read_kv_config, save_params
from .backbone import BackboneConfig, OptimizerConfig, OptimizerState, SequenceBatch, Stage, ToyAudioLM, train_step
from .mixture import (
    MixtureSpec,
    SequenceConfig,
    SynthConfig,
    TaskKind,
    build_sequence,
    load_corpus,
    parse_stage,
    plan_epoch,
    sample_tasks,
    synth_corpus,
)

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3

logger = logging.getLogger("moeaudio")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- train-demo ---------------------------------------------------------------

def _demo_batches(spec: MixtureSpec, corpus, rng, batch_size: int, seq_config: SequenceConfig):
    pools = {kind: [r for r in corpus if kind in r.tasks] for kind, _ in spec.active()}
    while True:
        seqs = []
        for kind in sample_tasks(spec, rng, batch_size):
            pool = pools[kind]
            if not pool:
                raise ConfigError(f"corpus has no records for task {kind.value}")
            seqs.append(build_sequence(kind, pool[rng.integers(len(pool))], seq_config))
        yield SequenceBatch(seqs)


def cmd_train_demo(args) -> int:
    from . import plotting

    if args.aux_weight < 0:
        raise ConfigError(f"train-demo.aux_weight: must be >= 0, got {args.aux_weight}")
    if args.steps < 1:
        raise ConfigError(f"train-demo.steps: must be >= 1, got {args.steps}")
    stages = [parse_stage(s) for s in args.stages.split(",") if s.strip()]
    if not stages or Stage.SFT in stages:
        raise ConfigError("train-demo.stages: expected a comma list of align and/or joint_pretrain")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    synth = SynthConfig(d_in=args.d_in)
    if args.corpus:
        corpus = load_corpus(args.corpus)
    else:
        corpus = synth_corpus(args.records, seed=args.seed, cfg=synth,
                              tasks=[TaskKind.AUDIO_UNIMODAL, TaskKind.ASR, TaskKind.TTS,
                                     TaskKind.INTERLEAVING, TaskKind.CAPTIONING])
    d_in = corpus[0].frames.shape[1] if corpus[0].frames is not None else args.d_in
    ac = AdapterConfig(d_in=d_in, d_expert_hidden=args.expert_hidden, d_out=args.d_model,
                       num_experts=args.experts, top_k=args.top_k, aux_weight=args.aux_weight)
    bc = BackboneConfig(text_vocab=synth.text_vocab, audio_vocab=synth.audio_vocab, d_model=args.d_model,
                        n_layers=args.layers, n_heads=args.heads, max_seq_len=64)
    opt = OptimizerConfig(kind=args.optimizer, lr=args.lr)
    model = ToyAudioLM.create(ac, bc, seed=args.seed)
    save_params(out / "checkpoint_init", model.snapshot())

    rng = np.random.default_rng(args.seed)
    seq_config = SequenceConfig(interleave_chunk=4)
    per_stage = [args.steps // len(stages) + (i < args.steps % len(stages)) for i in range(len(stages))]
    metrics = []
    state = OptimizerState()
    with open(out / "metrics.jsonl", "w") as fh:
        for stage, n_steps in zip(stages, per_stage):
            batches = _demo_batches(MixtureSpec.for_stage(stage), corpus, rng, args.batch_size, seq_config)
            for _ in range(n_steps):
                m = train_step(next(batches), stage, model, opt, state)
                metrics.append(m)
                fh.write(json.dumps(m, sort_keys=True) + "\n")
                if args.verbose and state.step % 20 == 0:
                    logger.info("step %d %s loss=%.4f ntp=%.4f aux=%.4f", m["step"], m["stage"], m["loss"],
                                m["l_ntp"], m["l_aux"])
    save_params(out / "checkpoint", model.snapshot())
    # batches without audio frames route nothing and report no utilization
    routed = [m["utilization"] for m in metrics if m["utilization"]][-20:]
    util = np.mean(routed, axis=0) if routed else np.zeros(args.experts)
    plotting.loss_curves(metrics, out / "loss_curves.png")
    plotting.expert_utilization(util, out / "expert_utilization.png")
    summary = {
        "command": "train-demo", "seed": args.seed, "steps": len(metrics),
        "stages": [s.value for s in stages], "aux_weight": args.aux_weight,
        "initial_l_ntp": metrics[0]["l_ntp"], "final_l_ntp": metrics[-1]["l_ntp"],
        "final_utilization": util.tolist(),
        "files": ["metrics.jsonl", "checkpoint", "checkpoint_init", "loss_curves.png", "expert_utilization.png"],
    }
    _write_json(out / "summary.json", summary)
    print("stage\tsteps\tfirst_l_ntp\tlast_l_ntp")
    for stage in stages:
        rows = [m for m in metrics if m["stage"] == stage.value]
        print(f"{stage.value}\t{len(rows)}\t{rows[0]['l_ntp']:.6f}\t{rows[-1]['l_ntp']:.6f}")
    return EXIT_OK


# -- mix-plan -----------------------------------------------------------------

def cmd_mix_plan(args) -> int:
    from . import plotting

    if args.draws < 1:
        raise ConfigError(f"mix-plan.draws: must be >= 1, got {args.draws}")
    if args.mixture:
        spec = MixtureSpec.from_kv(read_kv_config(args.mixture))
    else:
        spec = MixtureSpec.for_stage(args.stage)
    rng = np.random.default_rng(args.seed)
    draws = sample_tasks(spec, rng, args.draws)
    counts = {k: 0 for k, _ in spec.active()}
    for k in draws:
        counts[k] += 1
    target = {k.value: w for k, w in spec.active()}
    observed = {k.value: c / args.draws for k, c in counts.items()}
    cat_target = {c: w for c, w in spec.category_weights().items() if w > 0}
    cat_observed: dict[str, float] = {}
    for k, c in counts.items():
        cat_observed[k.category] = cat_observed.get(k.category, 0.0) + c / args.draws

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = {
        "command": "mix-plan", "stage": spec.stage.value, "seed": args.seed, "draws": args.draws,
        "tasks": {k: {"target": target[k], "observed": observed[k], "count": counts[TaskKind(k)]} for k in target},
        "categories": {c: {"target": cat_target[c], "observed": cat_observed.get(c, 0.0)} for c in cat_target},
        "max_abs_deviation": max(abs(observed[k] - target[k]) for k in target),
    }
    if args.token_budget:
        corpus = synth_corpus(args.records, n_text=args.records, seed=args.seed,
                              tasks=[k for k, _ in spec.active()])
        plan = plan_epoch(spec, corpus, args.token_budget, seed=args.seed, batch_size=args.batch_size)
        plan.to_jsonl(out / "plan.jsonl")
        report["plan"] = {"entries": len(plan.entries), "batches": len(plan.batches),
                          "tokens": plan.total_tokens, "modality_token_shares": plan.modality_token_shares()}
    _write_json(out / "summary.json", report)
    plotting.mixture_frequencies(target, observed, out / "frequencies.png", title=f"stage {spec.stage.value}")
    print("task\tcategory\ttarget\tobserved\tcount")
    for k in target:
        kind = TaskKind(k)
        print(f"{k}\t{kind.category}\t{target[k]:.4f}\t{observed[k]:.4f}\t{counts[kind]}")
    return EXIT_OK


# -- dataflux -----------------------------------------------------------------

def _clients(endpoints_path, roles, out: Path, parallelism: int):
    from .gateway import ModelClient, RequestLog, load_endpoints

    endpoints = load_endpoints(endpoints_path)
    missing = [r.value for r in roles if r not in endpoints]
    if missing:
        raise ConfigError(f"{endpoints_path}: no endpoint configured for roles {missing}")
    log = RequestLog(out / "requests.jsonl")
    return {r: ModelClient(endpoints[r], request_log=log) for r in roles}


def cmd_dataflux(args) -> int:
    from .dataflux.pipeline import DataFluxConfig, DataFluxModels, load_manifest, run_pipeline
    from .dataflux.taxonomy import Taxonomy
    from .gateway import Role

    try:
        steps = frozenset(int(s) for s in args.steps.split(",") if s.strip())
    except ValueError:
        raise ConfigError(f"dataflux.steps: expected a comma list of 1,2,3, got {args.steps!r}") from None
    if not steps or not steps <= {1, 2, 3}:
        raise ConfigError(f"dataflux.steps: expected a comma list of 1,2,3, got {args.steps!r}")
    if args.parallelism < 1:
        raise ConfigError("dataflux.parallelism: must be >= 1")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    roles = [Role.CAPTIONER, Role.GENERATOR, Role.ANSWERER_A, Role.ANSWERER_B, Role.JUDGE]
    clients = _clients(args.endpoints, roles, out, args.parallelism)
    models = DataFluxModels(*(clients[r] for r in roles))
    config = DataFluxConfig(
        steps=steps, parallelism=args.parallelism, strict=args.strict,
        few_shots=Path(args.few_shots).read_text().rstrip("\n") if args.few_shots else DataFluxConfig.few_shots,
        rules_dir=Path(args.rules_dir) if args.rules_dir else None,
        taxonomy=Taxonomy.from_file(args.taxonomy) if args.taxonomy else Taxonomy.bundled(),
        audio_root=Path(args.input).resolve().parent,
    )
    summary = run_pipeline(load_manifest(args.input), models, out, config)
    print("outcome\tcount")
    print(f"kept\t{summary.kept}")
    for reason, n in sorted(summary.discarded.items()):
        print(f"discarded:{reason}\t{n}")
    print(f"parked\t{summary.parked}")
    return EXIT_OK if summary.reconciles() else EXIT_RUNTIME


# -- eval ---------------------------------------------------------------------

def _lines_or_literal(value: str) -> list[str]:
    p = Path(value)
    if p.is_file():
        return p.read_text().splitlines()
    return [value]


def cmd_eval_rate(args) -> int:
    from .evaluation import Normalization, corpus_rate

    refs, hyps = _lines_or_literal(args.ref), _lines_or_literal(args.hyp)
    if len(refs) != len(hyps):
        raise ConfigError(f"eval.{args.metric}: {len(refs)} reference lines but {len(hyps)} hypothesis lines")
    norm = Normalization(not args.keep_case, not args.keep_punctuation, True)
    totals = corpus_rate(zip(refs, hyps), "word" if args.metric == "wer" else "char", norm)
    totals["metric"] = args.metric
    if args.out:
        _write_json(Path(args.out) / "summary.json", totals)
    print("metric\trate\tS\tI\tD\tref_len\tutterances")
    print(f"{args.metric}\t{totals['rate']:.6f}\t{totals['substitutions']}\t{totals['insertions']}\t"
          f"{totals['deletions']}\t{totals['ref_len']}\t{totals['utterances']}")
    return EXIT_OK


def cmd_eval_caption_qa(args) -> int:
    from . import plotting
    from .evaluation import caption_then_answer, load_items, score_set, write_results
    from .gateway import GatewayError, Role

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    items = load_items(args.items)
    clients = _clients(args.endpoints, [Role.CAPTIONER, Role.QA_READER], out, args.parallelism)
    root = Path(args.items).resolve().parent

    def one(item):
        return caption_then_answer(item, clients[Role.CAPTIONER], clients[Role.QA_READER], audio_root=root)

    from concurrent.futures import ThreadPoolExecutor
    with ThreadPoolExecutor(max_workers=max(1, args.parallelism)) as pool:
        try:
            results = list(pool.map(one, items))
        except GatewayError as exc:
            logger.error("evaluation aborted: %s", exc)
            return EXIT_RUNTIME
    write_results(results, out / "results.jsonl")
    report = score_set(items, results)
    (out / "report.json").write_text(report.to_json())
    (out / "report.txt").write_text(report.to_table())
    plotting.accuracy_bars(report.to_dict(), out / "accuracy.png")
    _write_json(out / "summary.json", {"command": "eval caption-qa", **report.to_dict()})
    print(report.to_table(), end="")
    return EXIT_OK


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON or INI file supplying defaults for any flag")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = _Parser(prog="moeaudio", description="MoE audio adapter toolkit: toy training, mixtures, DataFlux, evaluation.")
    p.add_argument("--version", action="version", version=f"moeaudio {__version__}")
    sub = p.add_subparsers(dest="command", metavar="{train-demo,mix-plan,dataflux,eval}", parser_class=_Parser)
    sub.required = True

    t = sub.add_parser("train-demo", parents=[common], help="align then joint-pretrain the toy stack on synthetic data")
    t.add_argument("--steps", type=int, default=200, help="total steps, split evenly across stages")
    t.add_argument("--stages", default="align,joint_pretrain")
    t.add_argument("--aux-weight", type=float, default=0.01, help="load-balancing weight (lambda)")
    t.add_argument("--lr", type=float, default=0.01)
    t.add_argument("--optimizer", choices=["sgd", "adam"], default="adam")
    t.add_argument("--batch-size", type=int, default=8)
    t.add_argument("--records", type=int, default=64, help="synthetic records when --corpus is not given")
    t.add_argument("--corpus", help="corpus manifest (corpus.jsonl) instead of synthetic data")
    t.add_argument("--d-in", type=int, default=6)
    t.add_argument("--d-model", type=int, default=16)
    t.add_argument("--expert-hidden", type=int, default=16)
    t.add_argument("--experts", type=int, default=4)
    t.add_argument("--top-k", type=int, default=2)
    t.add_argument("--layers", type=int, default=2)
    t.add_argument("--heads", type=int, default=2)
    t.set_defaults(func=cmd_train_demo)

    m = sub.add_parser("mix-plan", parents=[common], help="sample a stage's task mixture and report frequencies")
    m.add_argument("--stage", default="1", help="1|2|3 or align|joint_pretrain|sft")
    m.add_argument("--mixture", help="INI file with custom task weights instead of a stage table")
    m.add_argument("--draws", type=int, default=100_000)
    m.add_argument("--token-budget", type=int, default=0, help="also plan one epoch over a synthetic corpus")
    m.add_argument("--records", type=int, default=200)
    m.add_argument("--batch-size", type=int, default=8)
    m.set_defaults(func=cmd_mix_plan)

    d = sub.add_parser("dataflux", help="generate, answer and judge instruction data")
    dsub = d.add_subparsers(dest="action", metavar="{run}", parser_class=_Parser)
    dsub.required = True
    r = dsub.add_parser("run", parents=[common], help="run or resume the pipeline over a manifest")
    r.add_argument("--input", required=True, help="manifest of {id, audio, taxonomy, caption?} lines")
    r.add_argument("--endpoints", required=True, help="JSON mapping each role to its endpoint")
    r.add_argument("--steps", default="1,2,3")
    r.add_argument("--parallelism", type=int, default=4)
    r.add_argument("--strict", action="store_true", help="keep STRONG_MATCH verdicts only")
    r.add_argument("--rules-dir", help="directory of <l0>.txt / default.txt judge rules")
    r.add_argument("--taxonomy", help="taxonomy JSON replacing the bundled one")
    r.add_argument("--few-shots", help="file with few-shot examples for query generation")
    r.set_defaults(func=cmd_dataflux)

    e = sub.add_parser("eval", help="error rates and caption-conditioned QA")
    esub = e.add_subparsers(dest="metric", metavar="{wer,cer,caption-qa}", parser_class=_Parser)
    esub.required = True
    for name in ("wer", "cer"):
        w = esub.add_parser(name, parents=[common], help=f"{name.upper()} of hypothesis lines against references")
        w.add_argument("--ref", required=True, help="reference file (one utterance per line) or literal text")
        w.add_argument("--hyp", required=True, help="hypothesis file or literal text")
        w.add_argument("--keep-case", action="store_true")
        w.add_argument("--keep-punctuation", action="store_true")
        w.set_defaults(func=cmd_eval_rate, out=None)
    q = esub.add_parser("caption-qa", parents=[common], help="caption the audio, then answer from the caption")
    q.add_argument("--items", required=True, help="items file of {id, audio, question, choices, gold} lines")
    q.add_argument("--endpoints", required=True)
    q.add_argument("--parallelism", type=int, default=4)
    q.set_defaults(func=cmd_eval_caption_qa)
    return p


def _load_config_file(path) -> dict:
    text = Path(path).read_text()
    if Path(path).suffix.lower() in (".ini", ".cfg"):
        return read_kv_config(path)
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return data


def _leaf_parser(parser: argparse.ArgumentParser, args) -> argparse.ArgumentParser:
    """Follow the chosen subcommands down to the parser that defines their flags."""
    node = parser
    while True:
        subs = [a for a in node._actions if isinstance(a, argparse._SubParsersAction)]
        if not subs:
            return node
        chosen = getattr(args, subs[0].dest)
        node = subs[0].choices[chosen]


def _coerce(action, raw, source: str):
    if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
        if isinstance(raw, bool):
            return raw
        return str(raw).lower() in ("1", "true", "yes", "on")
    if isinstance(action, argparse._CountAction):
        return int(raw)
    conv = action.type or str
    try:
        value = conv(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{source}: {action.dest}={raw!r} is not a valid {getattr(conv, '__name__', 'value')}") from None
    if action.choices is not None and value not in action.choices:
        raise ConfigError(f"{source}: {action.dest}={value!r} not one of {list(action.choices)}")
    return value


def resolve_args(parser: argparse.ArgumentParser, argv: list[str], environ=os.environ) -> argparse.Namespace:
    args = parser.parse_args(argv)
    leaf = _leaf_parser(parser, args)
    actions = {a.dest: a for a in leaf._actions if a.dest not in ("help", "config")}
    # flags given on the command line win over the config file
    explicit = set()
    for a in actions.values():
        if any(opt in argv or any(s.startswith(opt + "=") for s in argv) for opt in a.option_strings):
            explicit.add(a.dest)
    if getattr(args, "config", None):
        section = _load_config_file(args.config)
        for key, raw in section.items():
            dest = key.replace("-", "_")
            if dest not in actions:
                raise ConfigError(f"{args.config}: unknown setting {key!r}")
            if dest not in explicit:
                setattr(args, dest, _coerce(actions[dest], raw, args.config))
    for dest, action in actions.items():
        env = environ.get(f"MOEAUDIO_{dest.upper()}")
        if env is not None:
            setattr(args, dest, _coerce(action, env, f"MOEAUDIO_{dest.upper()}"))
    return args


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = resolve_args(parser, argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return EXIT_OK if not exc.code else EXIT_USAGE
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.WARNING - 10 * min(2, args.verbose or 0),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, OSError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        logger.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
