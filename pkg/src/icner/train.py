"""Pre-training with the meta-function objective.

Each in-context extraction task is paired with a surrogate model: a deep copy
of the current parameters pushed one plain gradient step toward the task's
demonstrations rendered as ordinary (instruction, text) -> entities training
instances. The pre-training loss then pulls the in-context encoder features
toward the surrogate's features (treated as constants), alongside the usual
extraction negative log-likelihood. Pseudo extraction LM batches alternate
with entity batches.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import kernels
from .codec import (
    IN_CONTEXT,
    TRADITIONAL,
    TokenizedExample,
    Vocabulary,
    linearize,
    tokenize_example,
)
from .corpus import NerInstance
from .errors import (
    AlignmentError,
    ConfigurationError,
    SamplingError,
    TrainingDivergedError,
)
from .model import (
    ModelConfig,
    ModelParams,
    check_feature_alignment,
    encoder_bwd,
    encoder_fwd,
    save_checkpoint,
    load_checkpoint,
    sequence_nll_grad,
)
from .pseudolm import DocumentSet, InsufficientSpansError, build_pseudo_task
from .sampler import (
    CorpusIndex,
    InContextTask,
    SamplerConfig,
    anonymize_types,
    sample_task,
)

__all__ = [
    "TrainConfig",
    "StepMetrics",
    "AdamW",
    "surrogate_step",
    "meta_function_loss",
    "train_step",
    "pretrain",
    "finetune",
    "PreparedTask",
    "prepare_ner_batch",
    "prepare_lm_batch",
]


@dataclass(frozen=True)
class TrainConfig:
    """Optimization schedule and loss mixing.

    alpha weights the meta-function term; inner_lr is the surrogate's single
    gradient step (defaults to outer_lr when None). task_mix is the
    (entity, pseudo-LM) batch ratio.
    """

    alpha: float = 0.5
    outer_lr: float = 3e-3
    inner_lr: float | None = None
    steps: int = 1000
    warmup_steps: int = 50
    batch_size: int = 4
    task_mix: tuple[int, int] = (1, 1)
    meta_fraction: float = 1.0
    weight_decay: float = 0.01
    max_grad_norm: float = 1.0
    checkpoint_every: int = 500
    seed: int = 0
    finetune_patience: int = 20
    finetune_tol: float = 1e-4

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigurationError("alpha must be >= 0")
        if self.outer_lr <= 0:
            raise ConfigurationError("outer_lr must be > 0")
        if self.inner_lr is not None and self.inner_lr < 0:
            raise ConfigurationError("inner_lr must be >= 0")
        if self.steps < 1:
            raise ConfigurationError("steps must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if len(self.task_mix) != 2 or min(self.task_mix) < 0 or sum(self.task_mix) == 0:
            raise ConfigurationError("task_mix must be a non-zero (ner, lm) pair")
        if not 0.0 <= self.meta_fraction <= 1.0:
            raise ConfigurationError("meta_fraction must be in [0, 1]")

    @property
    def effective_inner_lr(self) -> float:
        return self.outer_lr if self.inner_lr is None else self.inner_lr


@dataclass
class StepMetrics:
    step_index: int
    extraction_loss: float
    meta_function_loss: float
    combined_loss: float
    meta_gap: float
    kind: str = ""
    lr: float = 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


class AdamW:
    """Decoupled-weight-decay Adam. Weight decay applies to matrices only;
    vectors (norm gains, biases) and missing gradients are left undecayed."""

    def __init__(self, params: ModelParams, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.01):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {n: np.zeros_like(t) for n, t in params.tensors.items()}
        self.v = {n: np.zeros_like(t) for n, t in params.tensors.items()}

    def step(self, params: ModelParams, grads: dict, lr: float):
        self.t += 1
        for name, tensor in params.tensors.items():
            g = grads.get(name)
            if g is None:
                continue
            wd = self.weight_decay if tensor.ndim >= 2 else 0.0
            kernels.adamw_step(
                tensor.ravel(), np.ascontiguousarray(g, dtype=tensor.dtype).ravel(),
                self.m[name].ravel(), self.v[name].ravel(),
                self.t, lr, self.beta1, self.beta2, self.eps, wd,
            )

    def state_arrays(self) -> dict:
        out = {}
        for n, a in self.m.items():
            out[f"m:{n}"] = a
        for n, a in self.v.items():
            out[f"v:{n}"] = a
        return out

    def load_state_arrays(self, arrays: dict, t: int):
        self.t = t
        for n in self.m:
            self.m[n] = arrays[f"m:{n}"].copy()
            self.v[n] = arrays[f"v:{n}"].copy()


def clip_global_norm(grads: dict, max_norm: float) -> float:
    """Scale grads in place so their global L2 norm is at most max_norm;
    returns the pre-clip norm."""
    total = 0.0
    for g in grads.values():
        total += float(np.square(g, dtype=np.float64).sum())
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= scale
    return norm


def warmup_lr(base_lr: float, step: int, warmup_steps: int) -> float:
    if warmup_steps <= 0:
        return base_lr
    return base_lr * min(1.0, (step + 1) / warmup_steps)


# --- surrogate construction -------------------------------------------------


def demonstration_as_traditional(
    task: InContextTask, demo: NerInstance, vocab: Vocabulary
) -> TokenizedExample:
    """Recover one demonstration as a standalone (instruction, text) ->
    entities instance under the task's anonymization map."""
    mentions = sorted(demo.entities, key=lambda m: (m.start, m.end))
    pairs = tuple(
        (m.surface, task.anonymization_map.get(m.type_name, m.type_name))
        for m in mentions
    )
    sub = InContextTask(
        target_types=task.target_types,
        demonstrations=(),
        query=demo,
        gold_extractions=pairs,
        anonymization_map=task.anonymization_map,
        is_nil_query=not pairs,
    )
    return tokenize_example(linearize(sub, TRADITIONAL), vocab)


def surrogate_step(
    params: ModelParams,
    task: InContextTask,
    inner_lr: float,
    vocab: Vocabulary,
) -> ModelParams:
    """One-step plain gradient descent on the demonstrations, applied to a
    deep copy; the input params are untouched."""
    surrogate = params.copy()
    if inner_lr == 0.0:
        return surrogate
    if not task.demonstrations:
        raise ValueError("surrogate_step requires at least one demonstration")
    total: dict[str, np.ndarray] = {}
    for demo in task.demonstrations:
        ex = demonstration_as_traditional(task, demo, vocab)
        _, grads = sequence_nll_grad(params, ex, vocab.bos_id)
        for n, g in grads.items():
            if n in total:
                total[n] += g
            else:
                total[n] = g
    for n, g in total.items():
        surrogate.tensors[n] -= surrogate.dtype.type(inner_lr) * g
    return surrogate


# --- meta-function loss -----------------------------------------------------


def _meta_rows(ex: TokenizedExample):
    a, b = ex.instruction_range
    c, d = ex.text_range
    return (a, b), (c, d), (b - a) + (d - c)


def _check_pair_alignment(ic_ex: TokenizedExample, tr_ex: TokenizedExample):
    ia, ib = ic_ex.instruction_range
    ja, jb = tr_ex.instruction_range
    ta, tb = ic_ex.text_range
    ua, ub = tr_ex.text_range
    if (
        ic_ex.input_ids[ia:ib] != tr_ex.input_ids[ja:jb]
        or ic_ex.input_ids[ta:tb] != tr_ex.input_ids[ua:ub]
    ):
        raise AlignmentError(
            "instruction/text tokens differ between in-context and "
            "traditional renderings of the same task"
        )


def meta_feature_loss_grads(
    params: ModelParams,
    surrogate: ModelParams,
    ic_ex: TokenizedExample,
    tr_ex: TokenizedExample,
    want_grads: bool = True,
):
    """(loss, encoder grads) of the euclidean feature-matching term.

    The surrogate's features on (instruction, text) are computed once and
    used as constants; gradients flow only through the in-context encoder.
    """
    if params.config.feature_layer != -1:
        raise ConfigurationError(
            "meta-function gradients support feature_layer=-1 only"
        )
    _check_pair_alignment(ic_ex, tr_ex)
    y, cache = encoder_fwd(params, ic_ex.input_ids, train=False)
    y_prime, _ = encoder_fwd(surrogate, tr_ex.input_ids, train=False)

    (ia, ib), (ta, tb), rows = _meta_rows(ic_ex)
    (ja, jb), (ua, ub), rows_p = _meta_rows(tr_ex)
    f = np.concatenate([y[ia:ib], y[ta:tb]], axis=0)
    f_prime = np.concatenate([y_prime[ja:jb], y_prime[ua:ub]], axis=0)
    check_feature_alignment(f, f_prime)

    diff = (f - f_prime).astype(np.float64)
    norms = np.sqrt(np.square(diff).sum(axis=1))
    loss = float(norms.mean())
    if not want_grads:
        return loss, None

    safe = np.where(norms > 1e-12, norms, 1.0)
    dfe = (diff / (safe[:, None] * rows)).astype(params.dtype)
    dfe[norms <= 1e-12] = 0.0
    dy = np.zeros_like(y)
    n_i = ib - ia
    dy[ia:ib] = dfe[:n_i]
    dy[ta:tb] = dfe[n_i:]
    grads = encoder_bwd(params, cache, dy)
    return loss, grads


def meta_function_loss(
    params: ModelParams,
    surrogate: ModelParams,
    task: InContextTask,
    vocab: Vocabulary,
) -> float:
    """Feature distance between the in-context encoder and the surrogate's
    (instruction, text) encoder, averaged per aligned position."""
    ic_ex = tokenize_example(linearize(task, IN_CONTEXT), vocab)
    tr_ex = tokenize_example(linearize(task, TRADITIONAL), vocab)
    loss, _ = meta_feature_loss_grads(params, surrogate, ic_ex, tr_ex, False)
    return loss


# --- batches ----------------------------------------------------------------


@dataclass
class PreparedTask:
    """A task ready for one training step: the tokenized extraction example
    in its training mode, plus the traditional twin when the meta-function
    term applies."""

    task: InContextTask
    mode: str
    ex: TokenizedExample
    tr_ex: TokenizedExample | None = None
    use_meta: bool = False


def prepare_task(
    task: InContextTask, vocab: Vocabulary, mode: str, use_meta: bool
) -> PreparedTask:
    ex = tokenize_example(linearize(task, mode), vocab)
    tr_ex = None
    if use_meta:
        tr_ex = ex if mode == TRADITIONAL else tokenize_example(
            linearize(task, TRADITIONAL), vocab
        )
    return PreparedTask(task=task, mode=mode, ex=ex, tr_ex=tr_ex, use_meta=use_meta)


def prepare_ner_batch(
    index: CorpusIndex,
    sampler_cfg: SamplerConfig,
    cfg: TrainConfig,
    rng: np.random.Generator,
    vocab: Vocabulary,
    mode: str,
    anonymize: bool,
) -> list[PreparedTask]:
    batch = []
    for _ in range(cfg.batch_size):
        task = sample_task(index, sampler_cfg, rng)
        if mode == IN_CONTEXT and anonymize:
            task = anonymize_types(
                task, sampler_cfg.anonymize_prob, rng, sampler_cfg.num_indicators
            )
        use_meta = (
            mode == IN_CONTEXT
            and cfg.alpha > 0
            and (cfg.meta_fraction >= 1.0 or rng.random() < cfg.meta_fraction)
        )
        batch.append(prepare_task(task, vocab, mode, use_meta))
    return batch


def prepare_lm_batch(
    documents: list[str],
    sampler_cfg: SamplerConfig,
    cfg: TrainConfig,
    rng: np.random.Generator,
    vocab: Vocabulary,
    mode: str,
    set_size: int = 10,
    max_attempts: int = 25,
) -> list[PreparedTask]:
    if len(documents) < 2:
        raise ConfigurationError("pseudo-LM batches need at least 2 documents")
    batch = []
    size = min(set_size, len(documents))
    for _ in range(cfg.batch_size):
        task = None
        for _attempt in range(max_attempts):
            picks = rng.choice(len(documents), size, replace=False)
            docset = DocumentSet(tuple(documents[int(i)] for i in picks))
            try:
                task = build_pseudo_task(docset, sampler_cfg, rng, variant=mode)
                break
            except InsufficientSpansError:
                continue
        if task is None:
            raise SamplingError(
                f"no pseudo task constructible after {max_attempts} document sets"
            )
        batch.append(prepare_task(task, vocab, mode, use_meta=False))
    return batch


# --- training steps ---------------------------------------------------------


def batch_losses(
    params: ModelParams,
    batch: list[PreparedTask],
    cfg: TrainConfig,
    vocab: Vocabulary,
    surrogates: list[ModelParams | None] | None = None,
    want_grads: bool = True,
    train_mode: bool = False,
    dropout_rng: np.random.Generator | None = None,
):
    """Combined objective over one batch.

    Returns (extraction_loss, meta_loss, grads). When a surrogate list is
    given, those frozen surrogates are used instead of building new ones, so
    the function is a pure function of params (stop-gradient semantics made
    explicit for gradient checking).
    """
    if not batch:
        raise ValueError("batch is empty")
    grads: dict[str, np.ndarray] = {}

    def add_scaled(src: dict, scale: float):
        for n, g in src.items():
            if n in grads:
                grads[n] += scale * g
            else:
                grads[n] = scale * g

    ext_total = 0.0
    for item in batch:
        loss, g = sequence_nll_grad(
            params, item.ex, vocab.bos_id, train=train_mode, rng=dropout_rng,
            want_grads=want_grads,
        )
        ext_total += loss
        if want_grads:
            add_scaled(g, 1.0 / len(batch))
    ext_loss = ext_total / len(batch)

    meta_items = [i for i, item in enumerate(batch) if item.use_meta]
    meta_loss = 0.0
    if cfg.alpha > 0 and meta_items:
        total = 0.0
        for i in meta_items:
            item = batch[i]
            surrogate = None if surrogates is None else surrogates[i]
            if surrogate is None:
                surrogate = surrogate_step(
                    params, item.task, cfg.effective_inner_lr, vocab
                )
            mloss, mg = meta_feature_loss_grads(
                params, surrogate, item.ex, item.tr_ex, want_grads
            )
            total += mloss
            if want_grads:
                add_scaled(mg, cfg.alpha / len(meta_items))
        meta_loss = total / len(meta_items)
    return ext_loss, meta_loss, (grads if want_grads else None)


def train_step(
    params: ModelParams,
    batch: list[PreparedTask],
    cfg: TrainConfig,
    opt: AdamW,
    step_index: int,
    vocab: Vocabulary,
    kind: str = "",
    dropout_rng: np.random.Generator | None = None,
) -> StepMetrics:
    """One optimizer update in place; returns the step metrics."""
    ext_loss, meta_loss, grads = batch_losses(
        params, batch, cfg, vocab,
        train_mode=dropout_rng is not None, dropout_rng=dropout_rng,
    )
    combined = cfg.alpha * meta_loss + ext_loss
    if not np.isfinite(combined):
        raise TrainingDivergedError(
            f"non-finite loss at step {step_index}",
            snapshot={
                "step": step_index,
                "extraction_loss": ext_loss,
                "meta_function_loss": meta_loss,
            },
        )
    clip_global_norm(grads, cfg.max_grad_norm)
    lr = warmup_lr(cfg.outer_lr, step_index, cfg.warmup_steps)
    opt.step(params, grads, lr)
    return StepMetrics(
        step_index=step_index,
        extraction_loss=float(ext_loss),
        meta_function_loss=float(meta_loss),
        combined_loss=float(combined),
        meta_gap=float(meta_loss),
        kind=kind,
        lr=lr,
    )


# --- full pre-training loop -------------------------------------------------


def _batch_kind_cycle(task_mix: tuple[int, int]) -> list[str]:
    a, b = task_mix
    return ["ner"] * a + ["lm"] * b


def build_vocabulary(
    corpus: list[NerInstance],
    documents: list[str],
    extra_labels: tuple[str, ...] = (),
    num_type_indicators: int = 99,
) -> Vocabulary:
    texts = [inst.text for inst in corpus] + list(documents)
    labels = sorted({m.type_name for inst in corpus for m in inst.entities}
                    | set(extra_labels))
    return Vocabulary.build(
        texts, labels, num_type_indicators=num_type_indicators
    )


def pretrain(
    corpus: list[NerInstance],
    documents: list[str],
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    sampler_cfg: SamplerConfig,
    out_dir: str | Path | None = None,
    ablate: tuple[str, ...] = (),
    vocab: Vocabulary | None = None,
    resume: bool = False,
    log_fn=None,
):
    """Run the full alternating pre-training loop.

    ablate may contain "mf" (alpha forced to 0), "lm" (no pseudo-LM batches),
    and "anonymization" (type names always kept). Returns (params, vocab,
    metrics list). With out_dir set, writes vocab.txt, metrics.jsonl, and
    model.npz (with optimizer state and rng states for resume).
    """
    unknown = set(ablate) - {"mf", "lm", "anonymization"}
    if unknown:
        raise ConfigurationError(f"unknown ablation(s): {sorted(unknown)}")
    if "mf" in ablate:
        cfg = TrainConfig(**{**asdict(cfg), "alpha": 0.0})
    if "lm" in ablate:
        cfg = TrainConfig(**{**asdict(cfg), "task_mix": (1, 0)})
    anonymize = "anonymization" not in ablate

    if vocab is None:
        vocab = build_vocabulary(
            corpus, documents, num_type_indicators=sampler_cfg.num_indicators
        )
    if model_cfg.vocab_size != len(vocab.tokens):
        model_cfg = ModelConfig(
            **{**model_cfg.to_dict(), "vocab_size": len(vocab.tokens)}
        )

    index = CorpusIndex(corpus)
    cycle = _batch_kind_cycle(cfg.task_mix)
    out_path = Path(out_dir) if out_dir is not None else None
    ckpt_file = out_path / "model.npz" if out_path else None

    start_step = 0
    metrics: list[StepMetrics] = []
    if resume and ckpt_file and ckpt_file.exists():
        params, extra_arrays, extra_meta = load_checkpoint(ckpt_file)
        opt = AdamW(params, weight_decay=cfg.weight_decay)
        opt.load_state_arrays(extra_arrays, extra_meta["opt_t"])
        start_step = extra_meta["step"]
        sample_rng = np.random.default_rng()
        sample_rng.bit_generator.state = extra_meta["rng_states"]["sample"]
        drop_rng = np.random.default_rng()
        drop_rng.bit_generator.state = extra_meta["rng_states"]["dropout"]
    else:
        params = ModelParams.init(model_cfg)
        opt = AdamW(params, weight_decay=cfg.weight_decay)
        seeds = np.random.SeedSequence(cfg.seed).spawn(2)
        sample_rng = np.random.default_rng(seeds[0])
        drop_rng = np.random.default_rng(seeds[1])

    if out_path:
        out_path.mkdir(parents=True, exist_ok=True)
        vocab.save(out_path / "vocab.txt")
        mode = "a" if start_step > 0 else "w"
        metrics_f = (out_path / "metrics.jsonl").open(mode, encoding="utf-8")
    else:
        metrics_f = None

    def save(step: int):
        if not ckpt_file:
            return
        extra_meta = {
            "step": step,
            "opt_t": opt.t,
            "ablations": sorted(ablate),
            "optimizer": "adamw",
            "train_config": asdict(cfg),
            "sampler_config": asdict(sampler_cfg),
            "rng_states": {
                "sample": sample_rng.bit_generator.state,
                "dropout": drop_rng.bit_generator.state,
            },
        }
        save_checkpoint(ckpt_file, params, opt.state_arrays(), extra_meta)

    ner_count = sum(
        1 for s in range(start_step) if cycle[s % len(cycle)] == "ner"
    )
    lm_count = start_step - ner_count
    try:
        for step in range(start_step, cfg.steps):
            kind = cycle[step % len(cycle)]
            if kind == "ner":
                mode = IN_CONTEXT if ner_count % 2 == 0 else TRADITIONAL
                ner_count += 1
                batch = prepare_ner_batch(
                    index, sampler_cfg, cfg, sample_rng, vocab, mode, anonymize
                )
            else:
                mode = IN_CONTEXT if lm_count % 2 == 0 else TRADITIONAL
                lm_count += 1
                batch = prepare_lm_batch(
                    documents, sampler_cfg, cfg, sample_rng, vocab, mode
                )
            use_dropout = model_cfg.dropout > 0.0
            sm = train_step(
                params, batch, cfg, opt, step, vocab,
                kind=f"{kind}_{'ic' if mode == IN_CONTEXT else 'tr'}",
                dropout_rng=drop_rng if use_dropout else None,
            )
            metrics.append(sm)
            if metrics_f:
                metrics_f.write(sm.to_json() + "\n")
            if log_fn:
                log_fn(sm)
            if (ckpt_file and cfg.checkpoint_every > 0
                    and (step + 1) % cfg.checkpoint_every == 0):
                save(step + 1)
        save(cfg.steps)
    finally:
        if metrics_f:
            metrics_f.close()
    return params, vocab, metrics


# --- fine-tuning mode -------------------------------------------------------


def finetune(
    params: ModelParams,
    support: list[NerInstance],
    target_types: tuple[str, ...],
    cfg: TrainConfig,
    vocab: Vocabulary,
) -> ModelParams:
    """Multi-step full-model training on the support set rendered in
    traditional mode, with early stopping on the support loss plateau. The
    input params are unchanged."""
    if not support:
        raise ValueError("support set is empty")
    work = params.copy()
    examples = []
    empty_map: dict[str, str] = {}
    tset = set(target_types)
    for inst in support:
        mentions = sorted(
            (m for m in inst.entities if m.type_name in tset),
            key=lambda m: (m.start, m.end),
        )
        pairs = tuple((m.surface, m.type_name) for m in mentions)
        sub = InContextTask(
            target_types=tuple(target_types),
            demonstrations=(),
            query=inst,
            gold_extractions=pairs,
            anonymization_map=empty_map,
            is_nil_query=not pairs,
        )
        examples.append(tokenize_example(linearize(sub, TRADITIONAL), vocab))

    opt = AdamW(work, weight_decay=cfg.weight_decay)
    best_loss = float("inf")
    best = work.copy()
    stale = 0
    for step in range(cfg.steps):
        grads: dict[str, np.ndarray] = {}
        total = 0.0
        for ex in examples:
            loss, g = sequence_nll_grad(work, ex, vocab.bos_id)
            total += loss
            for n, arr in g.items():
                if n in grads:
                    grads[n] += arr / len(examples)
                else:
                    grads[n] = arr / len(examples)
        mean_loss = total / len(examples)
        if not np.isfinite(mean_loss):
            raise TrainingDivergedError(f"non-finite fine-tune loss at step {step}")
        if mean_loss < best_loss - cfg.finetune_tol:
            best_loss = mean_loss
            best = work.copy()
            stale = 0
        else:
            stale += 1
            if stale >= cfg.finetune_patience:
                break
        clip_global_norm(grads, cfg.max_grad_norm)
        opt.step(work, grads, warmup_lr(cfg.outer_lr, step, cfg.warmup_steps))
    final_loss = _support_loss(work, examples, vocab)
    return work if final_loss <= best_loss else best


def _support_loss(params, examples, vocab) -> float:
    total = 0.0
    for ex in examples:
        loss, _ = sequence_nll_grad(params, ex, vocab.bos_id, want_grads=False)
        total += loss
    return total / len(examples)
