"""Command-line front end: one subcommand per pipeline stage.

Every stage is a pure function of (inputs, config, seed); each output
directory carries a ``config.json`` echo with the digest of the resolved
config so artifacts are traceable and reruns are byte-identical.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import behavior as behavior_mod
from . import evaluation as eval_mod
from .config import RunConfig, validate_config
from .data import (
    EmbeddingTable,
    generate_synthetic,
    load_embedding_table,
    load_interactions,
    split_train_eval,
    write_embedding_table,
    write_interactions,
)
from .errors import ConfigError, EsansError
from .model import EbrCheckpoint, TwoTowerModel, train_ebr
from .msac import (
    AlignmentParams,
    CascadedCodebooks,
    Codebook,
    MsacModel,
    SemanticIndex,
    build_semantic_index,
    make_semantic_index,
    train_msac,
)
from .sampler import cluster_distribution, draw_negatives

log = logging.getLogger("esans")


def _setup_logging() -> None:
    level = os.environ.get("ESANS_LOG", "warn").lower()
    levels = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.WARNING), stream=sys.stderr)


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _echo_config(cfg: RunConfig, out: Path) -> None:
    _write_json(out / "config.json", {"digest": cfg.digest(), "config": cfg.resolved()})


def _table(matrix, ids=None, modality="learned") -> EmbeddingTable:
    arr = np.asarray(matrix, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if ids is None:
        ids = [str(i) for i in range(arr.shape[0])]
    return EmbeddingTable(ids, arr, modality)


def cmd_synth_data(cfg: RunConfig, args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = generate_synthetic(cfg.synthetic)
    write_interactions(ds.log, out / "interactions.tsv")
    write_embedding_table(ds.image, out / "image.emb")
    write_embedding_table(ds.text, out / "text.emb")
    write_embedding_table(ds.behavior, out / "behavior.emb")
    with (out / "groups.tsv").open("w", encoding="utf-8") as fh:
        for item in ds.image.item_order:
            fh.write(f"{item}\t{ds.groups[item]}\n")
    _echo_config(cfg, out)
    log.info("wrote synthetic dataset to %s", out)


def cmd_pretrain_behavior(cfg: RunConfig, args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    logd = load_interactions(Path(args.data) / "interactions.tsv")
    manifest = Path(args.data) / "image.emb.ids"
    if manifest.exists():  # full item universe, incl. never-interacted items
        vocab = manifest.read_text(encoding="utf-8").splitlines()
    else:
        vocab = logd.items
    pairs = behavior_mod.build_cooccurrence_pairs(logd, cfg.behavior)
    table = behavior_mod.train_item2vec(pairs, vocab, cfg.behavior)
    write_embedding_table(table, out / "behavior.emb")
    _echo_config(cfg, out)


def _load_tables(data_dir: Path) -> tuple[EmbeddingTable, EmbeddingTable, EmbeddingTable]:
    return (
        load_embedding_table(data_dir / "image.emb", "image"),
        load_embedding_table(data_dir / "text.emb", "text"),
        load_embedding_table(data_dir / "behavior.emb", "behavior"),
    )


def _save_msac(model: MsacModel, out: Path) -> None:
    p = model.params
    for name, tensor in (
        ("w_image", p.w_image), ("w_text", p.w_text), ("w_behavior", p.w_behavior),
        ("b_image", p.b_image), ("b_text", p.b_text), ("b_behavior", p.b_behavior),
    ):
        write_embedding_table(_table(tensor.detach().numpy()), out / f"{name}.emb")
    write_embedding_table(
        _table(model.codebooks.primary.codewords.detach().numpy()), out / "codebook_primary.emb"
    )
    write_embedding_table(
        _table(model.codebooks.secondary.codewords.detach().numpy()),
        out / "codebook_secondary.emb",
    )
    _write_json(out / "msac_meta.json", {"epoch_losses": model.epoch_losses})


def _load_msac(cfg: RunConfig, msac_dir: Path) -> MsacModel:
    def t(name: str, flat: bool = False) -> torch.Tensor:
        m = load_embedding_table(msac_dir / f"{name}.emb").matrix
        return torch.tensor(m[0] if flat else m, dtype=torch.float64)

    params = AlignmentParams(
        t("w_image"), t("w_text"), t("w_behavior"),
        t("b_image", flat=True), t("b_text", flat=True), t("b_behavior", flat=True),
    )
    codebooks = CascadedCodebooks(
        Codebook(t("codebook_primary"), "primary"),
        Codebook(t("codebook_secondary"), "secondary"),
    )
    return MsacModel(params, codebooks, cfg.msac)


def cmd_train_msac(cfg: RunConfig, args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    image, text, behavior = _load_tables(Path(args.data))
    model = train_msac(image, text, behavior, cfg.msac)
    _save_msac(model, out)
    _echo_config(cfg, out)


def cmd_build_index(cfg: RunConfig, args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    image, text, behavior = _load_tables(Path(args.data))
    model = _load_msac(cfg, Path(args.msac))
    index = build_semantic_index(model, image, text, behavior)
    with (out / "assignments.tsv").open("w", encoding="utf-8") as fh:
        for item, cp, cs in zip(index.item_order, index.primary, index.secondary):
            fh.write(f"{item}\t{cp}\t{cs}\n")
    write_embedding_table(_table(index.distances), out / "distances.emb")
    write_embedding_table(
        _table(model.codebooks.primary.codewords.detach().numpy()), out / "codebook_primary.emb"
    )
    write_embedding_table(
        _table(model.codebooks.secondary.codewords.detach().numpy()),
        out / "codebook_secondary.emb",
    )
    _echo_config(cfg, out)


def load_index(index_dir: Path, k_secondary: int) -> SemanticIndex:
    items, primary, secondary = [], [], []
    for line in (index_dir / "assignments.tsv").read_text(encoding="utf-8").splitlines():
        item, cp, cs = line.split("\t")
        items.append(item)
        primary.append(int(cp))
        secondary.append(int(cs))
    distances = load_embedding_table(index_dir / "distances.emb").matrix
    return make_semantic_index(
        items, np.array(primary), np.array(secondary),
        load_embedding_table(index_dir / "codebook_primary.emb").matrix,
        k_secondary, distances=distances,
    )


def _save_checkpoint(ckpt: EbrCheckpoint, out: Path) -> None:
    state = ckpt.model.state_dict()
    blocks = {}
    for name, tensor in state.items():
        fname = name.replace(".", "_") + ".emb"
        arr = tensor.detach().numpy()
        ids = ckpt.item_vocab if name == "item_embedding.weight" else None
        write_embedding_table(_table(arr, ids=ids), out / fname)
        blocks[name] = {"file": fname, "shape": list(tensor.shape)}
    _write_json(
        out / "manifest.json",
        {
            "blocks": blocks,
            "config": ckpt.config.__dict__
            | {"sampler": ckpt.config.sampler.__dict__, "interpolation": ckpt.config.interpolation.__dict__},
            "epoch_losses": ckpt.epoch_losses,
            "user_buckets": ckpt.user_buckets,
            "seed": ckpt.config.seed,
        },
    )


def load_checkpoint(cfg: RunConfig, model_dir: Path) -> EbrCheckpoint:
    manifest = json.loads((model_dir / "manifest.json").read_text(encoding="utf-8"))
    vocab = (model_dir / "item_embedding_weight.emb.ids").read_text(encoding="utf-8").splitlines()
    ebr = cfg.ebr
    model = TwoTowerModel(len(vocab), ebr.profile_buckets, ebr)
    state = {}
    for name, meta in manifest["blocks"].items():
        m = load_embedding_table(model_dir / meta["file"]).matrix
        shape = meta["shape"]
        state[name] = torch.tensor(m.reshape(shape), dtype=torch.float64)
    model.load_state_dict(state)
    ckpt = EbrCheckpoint(model, vocab, dict(manifest["user_buckets"]), ebr)
    ckpt.epoch_losses = list(manifest["epoch_losses"])
    return ckpt


def cmd_train_ebr(cfg: RunConfig, args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    logd = load_interactions(Path(args.data) / "interactions.tsv")
    train, _ = split_train_eval(logd, cfg.eval.holdout_per_user)
    index = None
    if cfg.ebr.negative_mode == "esans":
        if not args.index:
            raise ConfigError(["train-ebr: --index is required for negative_mode=esans"])
        index = load_index(Path(args.index), cfg.msac.k_secondary)
    ckpt = train_ebr(train, index, cfg.ebr)
    _save_checkpoint(ckpt, out)
    _echo_config(cfg, out)


def cmd_evaluate(cfg: RunConfig, args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    logd = load_interactions(Path(args.data) / "interactions.tsv")
    train, eval_pairs = split_train_eval(logd, cfg.eval.holdout_per_user)
    ckpt = load_checkpoint(cfg, Path(args.model))
    report = eval_mod.recall_at_k(ckpt, eval_pairs, train, list(cfg.eval.k_values))
    lines = ["method\tK\trecall\tri_vs_uns"]
    for k in report.k_values:
        lines.append(f"{cfg.ebr.negative_mode}\t{k}\t{report.recalls[k]:.6f}\tnan")
    (out / "report.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    _write_json(
        out / "report.json",
        {
            "recalls": {str(k): report.recalls[k] for k in report.k_values},
            "user_count": report.user_count,
            "digest": cfg.digest(),
        },
    )


def cmd_compare(cfg: RunConfig, args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    logd = load_interactions(Path(args.data) / "interactions.tsv")
    train, eval_pairs = split_train_eval(logd, cfg.eval.holdout_per_user)
    image, text, behavior = _load_tables(Path(args.data))
    methods = eval_mod.ablation_methods(cfg.ebr)
    rows = eval_mod.compare_runs(
        train, eval_pairs, image, text, behavior, methods, cfg.msac, list(cfg.eval.k_values)
    )
    (out / "comparison.tsv").write_text(eval_mod.format_comparison(rows), encoding="utf-8")
    _echo_config(cfg, out)


def cmd_sample_inspect(cfg: RunConfig, args) -> None:
    index = load_index(Path(args.index), cfg.msac.k_secondary)
    rng = np.random.default_rng(cfg.seed)
    items = index.item_order
    count = min(args.count, len(items))
    lines = []
    for i in range(count):
        positive = items[i]
        draw = draw_negatives(index, positive, cfg.sampler, rng)
        cp, _ = index.cluster_of(positive)
        probs = cluster_distribution(index, cp, cfg.sampler.gamma, cfg.sampler.epsilon_d)
        lines.append(
            json.dumps(
                {
                    "positive": positive,
                    "groups": [{"cluster": c, "items": g} for c, g in draw.simple],
                    "hard": draw.hard,
                    "cluster_probabilities": [round(float(p), 9) for p in probs],
                },
                sort_keys=True,
            )
        )
    payload = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "draws.jsonl").write_text(payload, encoding="utf-8")
    else:
        sys.stdout.write(payload)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="esans", description="semantic-aware negative sampling pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, *, data=False, msac=False, index=False, model=False, out=True, extra=None):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        if data:
            p.add_argument("--data", required=True)
        if msac:
            p.add_argument("--msac", required=True)
        if index:
            p.add_argument("--index", required=True)
        if model:
            p.add_argument("--model", required=True)
        if out:
            p.add_argument("--out", required=True)
        if extra:
            extra(p)
        p.set_defaults(fn=fn)

    add("synth-data", cmd_synth_data)
    add("pretrain-behavior", cmd_pretrain_behavior, data=True)
    add("train-msac", cmd_train_msac, data=True)
    add("build-index", cmd_build_index, data=True, msac=True)
    add("train-ebr", cmd_train_ebr, data=True, index=False, extra=lambda p: p.add_argument("--index", default=None))
    add("evaluate", cmd_evaluate, data=True, model=True)
    add("compare", cmd_compare, data=True)
    add(
        "sample-inspect",
        cmd_sample_inspect,
        index=True,
        out=False,
        extra=lambda p: [p.add_argument("--out", default=None), p.add_argument("--count", type=int, default=10)],
    )
    return parser


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        cfg = validate_config(args.config)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        args.fn(cfg, args)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return 2
    except EsansError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
