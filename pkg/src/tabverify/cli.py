"""Command-line orchestration: reproducible runs tying all modules together.

Configuration resolves, in order of precedence: command-line flags, then
``TABVERIFY_<COMMAND>_<OPTION>`` environment variables, then a flat
``KEY=VALUE`` config file passed via ``--config``, then built-in defaults.
Every output file carries a short hash of the fully resolved configuration so
artifacts can be traced back to the run that produced them; outputs contain
no timestamps, so identical invocations with the same seed write identical
bytes.

Exit codes: 0 on success, 2 for missing inputs or invalid configuration,
3 for an internal invariant violation.
"""

from __future__ import annotations

import functools
import hashlib
import json
import os
import sys
from dataclasses import dataclass

import click
from filelock import FileLock, Timeout

from tabverify import corpus as corpus_mod
from tabverify import detector as detector_mod
from tabverify import evalkit
from tabverify import retriever as retriever_mod
from tabverify import trainer as trainer_mod
from tabverify.heads import injection_stats

EXIT_INVARIANT = 3


class InvariantError(RuntimeError):
    """An internal consistency check failed while producing outputs."""


@dataclass(frozen=True)
class RunConfig:
    """The fully resolved parameters of one command invocation."""

    command: str
    params: dict

    @property
    def hash(self) -> str:
        payload = json.dumps(
            {"command": self.command, **self.params}, sort_keys=True, default=str
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:12]


def parse_config_file(path: str) -> dict:
    """Flat ``KEY=VALUE`` lines; ``#`` starts a comment, blanks are skipped."""
    values: dict[str, str] = {}
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise click.UsageError(
                    f"{path}:{lineno}: expected KEY=VALUE, got {stripped!r}"
                )
            key, value = stripped.split("=", 1)
            values[key.strip().lower().replace("-", "_")] = value.strip()
    return values


def _require_file(path: str | None, what: str) -> str:
    if path is None:
        raise click.UsageError(f"missing required input: {what}")
    if not os.path.exists(path):
        raise click.UsageError(f"{what} not found: {path}")
    return path


def _gram_orders(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError:
        raise click.UsageError(f"invalid gram orders: {text!r}") from None


def _run_config(ctx: click.Context) -> RunConfig:
    return RunConfig(command=ctx.command.name or "", params=dict(ctx.params))


def _locked_outdir(out_dir: str):
    os.makedirs(out_dir, exist_ok=True)
    lock = FileLock(os.path.join(out_dir, ".tabverify.lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise click.UsageError(f"output directory {out_dir} is locked by another run")
    return lock


def _write_jsonl(path: str, header: dict, rows) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(json.dumps(header, sort_keys=True) + "\n")
        for row in rows:
            handle.write(json.dumps(row, sort_keys=True) + "\n")


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _guard(func):
    """Map internal invariant violations to exit code 3."""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except (InvariantError, AssertionError) as exc:
            click.echo(f"internal invariant violation: {exc}", err=True)
            sys.exit(EXIT_INVARIANT)

    return wrapper


def _defaults_for(command: click.Command, values: dict) -> dict:
    """Match flat config keys against a command's parameters.

    A key counts if it equals the parameter name or any of its long option
    spellings with dashes replaced by underscores, so ``index = ...`` feeds
    ``--index`` regardless of the parameter's internal name.
    """
    out = {}
    for param in command.params:
        candidates = {param.name}
        for opt in param.opts:
            candidates.add(opt.lstrip("-").replace("-", "_"))
        for candidate in candidates:
            if candidate in values:
                out[param.name] = values[candidate]
    return out


@click.group(context_settings={"auto_envvar_prefix": "TABVERIFY"})
@click.option(
    "--config",
    "config_path",
    type=click.Path(),
    default=None,
    help="Flat KEY=VALUE config file; flags and env vars override it.",
)
@click.pass_context
def main(ctx: click.Context, config_path: str | None) -> None:
    """Open-domain table fact verification pipeline."""
    if config_path is not None:
        values = parse_config_file(_require_file(config_path, "config file"))
        commands = ctx.command.commands if isinstance(ctx.command, click.Group) else {}
        ctx.default_map = {
            name: _defaults_for(cmd, values) for name, cmd in commands.items()
        }


def _index_options(func):
    func = click.option(
        "--gram-orders", default="2,3", show_default=True,
        help="Comma-separated n-gram orders.",
    )(func)
    func = click.option(
        "--unit", type=click.Choice([u.value for u in retriever_mod.Unit]),
        default=retriever_mod.Unit.CHAR_GRAM.value, show_default=True,
        help="Tokenization unit.",
    )(func)
    func = click.option(
        "--strategy", type=click.Choice([s.value for s in retriever_mod.Strategy]),
        default=retriever_mod.Strategy.ENTITY_LEVEL.value, show_default=True,
        help="Claim-to-cell matching strategy.",
    )(func)
    return func


def _model_options(func):
    for decorator in (
        click.option("--encode-dim", default=64, show_default=True,
                     help="Width n of each table encoding."),
        click.option("--embed-dim", default=64, show_default=True,
                     help="Width of the hashed-gram embedding rows."),
        click.option("--hash-buckets", default=2**15, show_default=True,
                     help="Number of feature-hashing buckets."),
        click.option("--encoder-hidden", default=128, show_default=True,
                     help="Hidden width of the encoder MLP."),
        click.option("--head-hidden", default=128, show_default=True,
                     help="Hidden width of the output head MLPs."),
        click.option("--attention-heads", default=2, show_default=True,
                     help="Cross-table attention head count."),
        click.option("--dropout", default=0.1, show_default=True,
                     help="Dropout rate before each MLP linear layer."),
        click.option("--max-rows", default=None, type=int,
                     help="Cap on linearised table rows (default unlimited)."),
        click.option(
            "--no-attention", is_flag=True, default=False,
            help="Ablate the cross-table attention fusion.",
        ),
    ):
        func = decorator(func)
    return func


def _train_options(func):
    for decorator in (
        click.option("--lr", default=1e-3, show_default=True,
                     help="Base learning rate."),
        click.option("--warmup-batches", default=100, show_default=True,
                     help="Linear warmup length in optimizer steps."),
        click.option("--batch-size", default=16, show_default=True,
                     help="Claims per optimizer step."),
        click.option("--epochs", default=30, show_default=True,
                     help="Passes over the training claims."),
        click.option(
            "--head", type=click.Choice(list(trainer_mod.HEAD_KINDS)),
            default="joint", show_default=True,
            help="Output formulation to train.",
        ),
        click.option(
            "--paper-scale", is_flag=True, default=False,
            help="Use the published large-scale learning regime "
            "(lr 5e-6, 30000 warmup batches, batch size 32).",
        ),
    ):
        func = decorator(func)
    return func


def _build_model_config(params: dict) -> trainer_mod.ModelConfig:
    return trainer_mod.ModelConfig(
        encode_dim=params["encode_dim"],
        embed_dim=params["embed_dim"],
        hash_buckets=params["hash_buckets"],
        encoder_hidden=params["encoder_hidden"],
        head_hidden=params["head_hidden"],
        attention_heads=params["attention_heads"],
        gram_orders=_gram_orders(params["gram_orders"]) if "gram_orders" in params else (2, 3),
        use_attention=not params["no_attention"],
        dropout=params["dropout"],
        max_rows=params["max_rows"],
    )


def _build_train_config(params: dict) -> trainer_mod.TrainConfig:
    overrides = dict(
        epochs=params["epochs"],
        seed=params["seed"],
        k=params["k"],
        head=params["head"],
    )
    if params["paper_scale"]:
        return trainer_mod.TrainConfig.paper_scale(**overrides)
    return trainer_mod.TrainConfig(
        learning_rate=params["lr"],
        warmup_batches=params["warmup_batches"],
        batch_size=params["batch_size"],
        **overrides,
    )


def _load_index_checked(path: str) -> retriever_mod.CellIndex:
    try:
        return retriever_mod.load_index(_require_file(path, "index file"))
    except ValueError as exc:
        raise click.UsageError(f"cannot load index {path}: {exc}") from exc


def _checkpoint_for(
    checkpoint_path: str, index: retriever_mod.CellIndex, force: bool
) -> trainer_mod.Checkpoint:
    checkpoint = trainer_mod.load_checkpoint(
        _require_file(checkpoint_path, "checkpoint")
    )
    fingerprint = retriever_mod.index_fingerprint(index.config)
    if checkpoint.index_fingerprint != fingerprint and not force:
        raise click.UsageError(
            "checkpoint was trained against a different index configuration "
            f"({checkpoint.index_fingerprint} != {fingerprint}); pass --force "
            "to evaluate anyway"
        )
    return checkpoint


@main.command("build-index")
@click.option("--corpus", "corpus_path", required=False, help="Table JSONL file.")
@click.option("--out", "out_path", required=False, help="Index file to write.")
@_index_options
@click.pass_context
@_guard
def build_index_cmd(ctx, corpus_path, out_path, gram_orders, unit, strategy):
    """Build the TF-IDF cell index for a table corpus."""
    run = _run_config(ctx)
    corpus = corpus_mod.load_tables(_require_file(corpus_path, "corpus file"))
    if out_path is None:
        raise click.UsageError("missing required output path: --out")
    config = retriever_mod.IndexConfig(
        gram_orders=_gram_orders(gram_orders),
        unit=retriever_mod.Unit(unit),
        strategy=retriever_mod.Strategy(strategy),
    )
    try:
        index = retriever_mod.build_index(corpus, config)
    except ValueError as exc:
        raise click.UsageError(str(exc)) from exc
    retriever_mod.save_index(index, out_path, extra_meta={"config_hash": run.hash})
    click.echo(
        f"indexed {index.doc_count} cells across {index.n_tables} tables -> {out_path}"
    )


@main.command("retrieve")
@click.option("--index", "index_path", required=False, help="Index file.")
@click.option("--claims", "claims_path", required=False, help="Claim JSONL file.")
@click.option("--out-dir", required=False, help="Output directory.")
@click.option("--k", default=5, show_default=True, help="Tables to keep per claim.")
@click.pass_context
@_guard
def retrieve_cmd(ctx, index_path, claims_path, out_dir, k):
    """Rank tables for each claim; writes rankings and a Hits@k report."""
    run = _run_config(ctx)
    if k < 1:
        raise click.UsageError("k must be >= 1")
    index = _load_index_checked(index_path)
    claims = corpus_mod.load_claims(_require_file(claims_path, "claims file"))
    if out_dir is None:
        raise click.UsageError("missing required output path: --out-dir")
    lock = _locked_outdir(out_dir)
    try:
        rows = []
        rankings: dict[str, list[str]] = {}
        for claim in claims:
            ranked = retriever_mod.rank_all(claim, index)
            rankings[claim.id] = [tid for tid, _ in ranked]
            rows.append(
                {
                    "claim_id": claim.id,
                    "ranked": [
                        {"table_id": tid, "score": score}
                        for tid, score in ranked[:k]
                    ],
                }
            )
        _write_jsonl(
            os.path.join(out_dir, "rankings.jsonl"), {"config_hash": run.hash}, rows
        )
        scored = [c for c in claims if c.gold_table_id is not None]
        if scored:
            ks = sorted({1, 3, 5, 10, k})
            hits = evalkit.hits_at_k(scored, rankings, ks)
            _write_json(
                os.path.join(out_dir, "hits.json"),
                {
                    "config_hash": run.hash,
                    "hits_at": {str(kk): v for kk, v in hits.items()},
                    "n_claims": len(scored),
                },
            )
            click.echo(
                "hits@k: "
                + "  ".join(f"H@{kk}={hits[kk]:.3f}" for kk in ks)
            )
        click.echo(f"wrote rankings for {len(claims)} claims -> {out_dir}")
    finally:
        lock.release()


@main.command("linearize")
@click.option("--corpus", "corpus_path", required=False, help="Table JSONL file.")
@click.option("--index", "index_path", required=False, help="Index file.")
@click.option("--claims", "claims_path", required=False, help="Claim JSONL file.")
@click.option("--out-dir", required=False, help="Output directory.")
@click.option("--k", default=3, show_default=True, help="Tables to linearise per claim.")
@click.option("--max-rows", default=None, type=int, help="Cap on rendered rows.")
@click.pass_context
@_guard
def linearize_cmd(ctx, corpus_path, index_path, claims_path, out_dir, k, max_rows):
    """Emit claim-table linearisations for inspection."""
    from tabverify.linearizer import linearize, select_columns

    run = _run_config(ctx)
    corpus = corpus_mod.load_tables(_require_file(corpus_path, "corpus file"))
    index = _load_index_checked(index_path)
    claims = corpus_mod.load_claims(_require_file(claims_path, "claims file"))
    if out_dir is None:
        raise click.UsageError("missing required output path: --out-dir")
    lock = _locked_outdir(out_dir)
    try:
        rows = []
        for claim in claims:
            for scored in retriever_mod.retrieve_topk(claim, index, k):
                table = corpus[scored.table_id]
                lin = linearize(
                    claim, table, select_columns(scored, table), max_rows=max_rows
                )
                rows.append(
                    {"claim_id": claim.id, "table_id": table.id, "text": lin.text}
                )
        _write_jsonl(
            os.path.join(out_dir, "linearisations.jsonl"),
            {"config_hash": run.hash},
            rows,
        )
        click.echo(f"wrote {len(rows)} linearisations -> {out_dir}")
    finally:
        lock.release()


@main.command("train")
@click.option("--corpus", "corpus_path", required=False, help="Table JSONL file.")
@click.option("--index", "index_path", required=False, help="Index file.")
@click.option("--train-claims", "train_claims_path", required=False, help="Training claim JSONL file.")
@click.option("--dev-claims", "dev_claims_path", default=None, help="Optional dev claims for best-epoch selection.")
@click.option("--out-dir", required=False, help="Output directory.")
@click.option("--k", default=3, show_default=True, help="Retrieved tables per claim.")
@click.option("--seed", default=0, show_default=True, help="Seed for all randomness.")
@_train_options
@_model_options
@click.pass_context
@_guard
def train_cmd(
    ctx, corpus_path, index_path, train_claims_path, dev_claims_path, out_dir,
    k, seed, **_,
):
    """Train encoder + fusion + the selected head; writes a checkpoint."""
    run = _run_config(ctx)
    corpus = corpus_mod.load_tables(_require_file(corpus_path, "corpus file"))
    index = _load_index_checked(index_path)
    train_claims = corpus_mod.load_claims(
        _require_file(train_claims_path, "training claims file")
    )
    dev_claims = None
    if dev_claims_path is not None:
        dev_claims = corpus_mod.load_claims(
            _require_file(dev_claims_path, "dev claims file")
        )
    if out_dir is None:
        raise click.UsageError("missing required output path: --out-dir")
    lock = _locked_outdir(out_dir)
    try:
        model_config = _build_model_config(
            {**ctx.params, "gram_orders": "2,3"}
        )
        train_config = _build_train_config(ctx.params)
        log_rows: list[dict] = []
        checkpoint = trainer_mod.train(
            train_claims,
            corpus,
            index,
            train_config,
            model_config,
            dev_claims=dev_claims,
            on_step=log_rows.append,
        )
        ckpt_path = os.path.join(out_dir, "model.ckpt.npz")
        trainer_mod.save_checkpoint(
            checkpoint, ckpt_path, extra_meta={"config_hash": run.hash}
        )
        _write_jsonl(
            os.path.join(out_dir, "train_log.jsonl"),
            {"config_hash": run.hash},
            log_rows,
        )
        message = f"trained {checkpoint.step} steps -> {ckpt_path}"
        if checkpoint.dev_accuracy is not None:
            message += f" (best dev accuracy {checkpoint.dev_accuracy:.3f})"
        click.echo(message)
    finally:
        lock.release()


@main.command("evaluate")
@click.option("--corpus", "corpus_path", required=False, help="Table JSONL file.")
@click.option("--index", "index_path", required=False, help="Index file.")
@click.option("--checkpoint", "checkpoint_path", required=False, help="Checkpoint file.")
@click.option("--claims", "claims_path", required=False, help="Claim JSONL file.")
@click.option("--out-dir", required=False, help="Output directory.")
@click.option("--k", default=None, type=int, help="Defaults to the trained k.")
@click.option("--oracle", is_flag=True, default=False,
              help="Closed setting: use the gold table as the only candidate.")
@click.option("--force", is_flag=True, default=False,
              help="Skip the checkpoint/index lineage check.")
@click.pass_context
@_guard
def evaluate_cmd(
    ctx, corpus_path, index_path, checkpoint_path, claims_path, out_dir, k,
    oracle, force,
):
    """Run inference and write accuracy, bucket, reranking, attention reports."""
    run = _run_config(ctx)
    corpus = corpus_mod.load_tables(_require_file(corpus_path, "corpus file"))
    index = _load_index_checked(index_path)
    checkpoint = _checkpoint_for(checkpoint_path, index, force)
    claims = corpus_mod.load_claims(_require_file(claims_path, "claims file"))
    if out_dir is None:
        raise click.UsageError("missing required output path: --out-dir")
    lock = _locked_outdir(out_dir)
    try:
        injections_before = injection_stats.calls
        report = trainer_mod.evaluate_checkpoint(
            checkpoint, claims, corpus, index, k=k, oracle=oracle,
            compute_gold_rank=True,
        )
        if injection_stats.calls != injections_before:
            raise InvariantError("gold injection fired during evaluation")

        metrics = evalkit.report_from_eval(report)
        _write_json(
            os.path.join(out_dir, "metrics.json"),
            {**metrics.to_dict(), "config_hash": run.hash,
             "n_evaluated": report.n_evaluated, "n_skipped": report.n_skipped,
             "head": report.head, "oracle": oracle},
        )
        rows = [
            {
                "claim_id": r.claim_id,
                "verdict": r.verdict,
                "p_true": r.p_true,
                "p_s": list(r.rerank) if r.rerank is not None else None,
                "per_table": [list(row) for row in r.per_table]
                if r.per_table is not None
                else None,
                "tables": list(r.table_ids),
                "gold_rank": r.gold_rank,
            }
            for r in report.records
        ]
        _write_jsonl(
            os.path.join(out_dir, "predictions.jsonl"), {"config_hash": run.hash}, rows
        )
        with open(os.path.join(out_dir, "buckets.csv"), "w", encoding="utf-8") as fh:
            fh.write(f"# config_hash={run.hash}\n")
            fh.write(evalkit.bucket_csv(metrics))
        attention = {
            r.claim_id: r.attention for r in report.records if r.attention is not None
        }
        if attention:
            sizes = {a.shape for a in attention.values()}
            top = max(sizes, key=lambda s: sum(1 for a in attention.values() if a.shape == s))
            buckets = {
                r.claim_id: evalkit.bucket_of(r.gold_rank)
                for r in report.records
                if r.gold_table_id is not None
            }
            summary = evalkit.attention_summary(
                {cid: a for cid, a in attention.items() if a.shape == top}, buckets
            )
            with open(
                os.path.join(out_dir, "attention.csv"), "w", encoding="utf-8"
            ) as fh:
                fh.write(f"# config_hash={run.hash}\n")
                fh.write(evalkit.attention_csv(summary))
        click.echo(
            f"accuracy {report.accuracy:.3f} over {report.n_evaluated} claims "
            f"-> {out_dir}"
        )
    finally:
        lock.release()


@main.command("detect-insufficient")
@click.option("--corpus", "corpus_path", required=False, help="Table JSONL file.")
@click.option("--index", "index_path", required=False, help="Index file.")
@click.option("--checkpoint", "checkpoint_path", required=False, help="Checkpoint file.")
@click.option("--claims", "claims_path", required=False, help="Claim JSONL file.")
@click.option("--out-dir", required=False, help="Output directory.")
@click.option("--k", default=None, type=int, help="Defaults to the trained k.")
@click.option("--force", is_flag=True, default=False, help="Skip the checkpoint/index lineage check.")
@click.option("--positive-gold-absent", is_flag=True, default=False,
              help="Flip the positive class to 'gold table absent'.")
@click.pass_context
@_guard
def detect_cmd(
    ctx, corpus_path, index_path, checkpoint_path, claims_path, out_dir, k,
    force, positive_gold_absent,
):
    """Score evidence sufficiency per claim; writes the PR curve CSV."""
    run = _run_config(ctx)
    corpus = corpus_mod.load_tables(_require_file(corpus_path, "corpus file"))
    index = _load_index_checked(index_path)
    checkpoint = _checkpoint_for(checkpoint_path, index, force)
    claims = corpus_mod.load_claims(_require_file(claims_path, "claims file"))
    if out_dir is None:
        raise click.UsageError("missing required output path: --out-dir")
    lock = _locked_outdir(out_dir)
    try:
        report = trainer_mod.evaluate_checkpoint(checkpoint, claims, corpus, index, k=k)
        pairs: list[tuple[detector_mod.SuitabilityScore, bool]] = []
        for record in report.records:
            if record.gold_table_id is None:
                continue
            if report.head == "joint":
                score = detector_mod.SuitabilityScore(
                    claim_id=record.claim_id,
                    score=detector_mod.joint_entropy(record.rerank),
                    method=detector_mod.Method.JOINT_ENTROPY,
                )
            else:
                from tabverify.heads import TernaryDistribution

                dist = TernaryDistribution(probs=list(record.per_table))
                score = detector_mod.SuitabilityScore(
                    claim_id=record.claim_id,
                    score=detector_mod.ternary_suitability(dist),
                    method=detector_mod.Method.TERNARY_MAX_RELEVANCE,
                )
            pairs.append((score, record.gold_in_retrieved))
        if not pairs:
            raise click.UsageError("no claims with a gold table id to score")
        curve = detector_mod.pr_curve(
            pairs, positive_is_gold_present=not positive_gold_absent
        )
        with open(os.path.join(out_dir, "pr_curve.csv"), "w", encoding="utf-8") as fh:
            fh.write(f"# config_hash={run.hash}\n")
            fh.write(detector_mod.curve_to_csv(curve))
        best = detector_mod.best_f1_point(curve)
        _write_json(
            os.path.join(out_dir, "operating_point.json"),
            {
                "config_hash": run.hash,
                "method": curve.method.value,
                "threshold": best.threshold,
                "precision": best.precision,
                "recall": best.recall,
                "baseline_precision": curve.baseline_precision,
            },
        )
        click.echo(
            f"best F1 point: threshold={best.threshold:.4f} "
            f"precision={best.precision:.3f} recall={best.recall:.3f} "
            f"(baseline precision {curve.baseline_precision:.3f}) -> {out_dir}"
        )
    finally:
        lock.release()


@main.command("ablate")
@click.option("--corpus", "corpus_path", required=False, help="Table JSONL file.")
@click.option("--index", "index_path", required=False, help="Index file.")
@click.option("--train-claims", "train_claims_path", required=False, help="Training claim JSONL file.")
@click.option("--eval-claims", "eval_claims_path", required=False, help="Evaluation claim JSONL file.")
@click.option("--out-dir", required=False, help="Output directory.")
@click.option("--k", default=3, show_default=True, help="Retrieved tables per claim.")
@click.option("--seed", default=0, show_default=True, help="Seed for all randomness.")
@_train_options
@_model_options
@click.pass_context
@_guard
def ablate_cmd(
    ctx, corpus_path, index_path, train_claims_path, eval_claims_path, out_dir,
    k, seed, **_,
):
    """Train and evaluate the four ablation variants on identical data."""
    run = _run_config(ctx)
    corpus = corpus_mod.load_tables(_require_file(corpus_path, "corpus file"))
    index = _load_index_checked(index_path)
    train_claims = corpus_mod.load_claims(
        _require_file(train_claims_path, "training claims file")
    )
    eval_claims = corpus_mod.load_claims(
        _require_file(eval_claims_path, "evaluation claims file")
    )
    if out_dir is None:
        raise click.UsageError("missing required output path: --out-dir")
    lock = _locked_outdir(out_dir)
    try:
        model_config = _build_model_config({**ctx.params, "gram_orders": "2,3"})
        train_config = _build_train_config(ctx.params)
        reports = evalkit.ablate(
            train_claims, eval_claims, corpus, index, train_config, model_config
        )
        if set(reports) != set(evalkit.ABLATION_VARIANTS):
            raise InvariantError("ablation harness did not produce all four variants")
        _write_json(
            os.path.join(out_dir, "ablation.json"),
            {
                "config_hash": run.hash,
                "variants": {name: r.to_dict() for name, r in reports.items()},
            },
        )
        for name in evalkit.ABLATION_VARIANTS:
            click.echo(f"{name}: accuracy {reports[name].accuracy:.3f}")
        click.echo(f"wrote ablation reports -> {out_dir}")
    finally:
        lock.release()


if __name__ == "__main__":
    main()
