"""End-to-end orchestration: configuration, training, parsing, evaluation,
and the analysis drivers behind the CLI.

Determinism contract: the data-order seed alone governs shuffling, the
model seed alone governs initialization and latent noise, and both are
combined with epoch/batch indices through stable hashes, so runs are
reproducible and resumable and the controlled-randomness protocol (same
init, different order) holds exactly.
"""

from __future__ import annotations

import json
import os
import random
import zlib
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch

from . import analysis as analysis_mod
from . import chart
from . import evaluation as eval_mod
from . import grounding as grounding_mod
from . import lexicon as lexicon_mod
from . import treebank as treebank_mod
from .errors import ConfigError, DataError
from .grammar import (GrammarShape, RuleTable, Sentence, SpanSet, sample_corpus,
                      tree_to_bracket, tree_to_spans)
from .parameterization import (AdamState, NetworkDims, ParameterSet, TrainingConfig,
                               load_checkpoint, loss_and_gradients, rule_scores,
                               save_checkpoint, scores_to_log_probs, update_parameters,
                               _encode_batch)

OUTPUT_DIR_ENV = "PCFGKIT_OUTPUT_DIR"


@dataclass
class ExperimentConfig:
    # paths
    train_corpus: str = None
    dev_treebank: str = None
    select_treebank: str = None  # model selection split; dev_treebank is then report-only
    image_vectors: str = None
    embeddings: str = None
    checkpoint_dir: str = "runs"
    output_dir: str = "out"
    # grammar shape and network dims
    num_nonterminals: int = 10
    num_preterminals: int = 20
    d_sym: int = 64
    d_word: int = 100
    d_img: int = 0
    encoder_mode: str = "mean"
    # training
    alpha: float = 0.0
    d_z: int = 0
    learning_rate: float = 1e-3
    batch_size: int = 8
    max_epochs: int = 10
    margin: float = 0.2
    model_seed: int = 0
    data_seed: int = 0
    checkpoint_every: int = 1
    clip_grad_norm: float = None
    # lexicon
    vocab_size: int = 10000
    lowercase: bool = False
    freeze_embeddings: bool = True
    # transfer and decoding
    strategy: str = "Random"
    decoder: str = "mbr"
    length_filter: float = None

    def __post_init__(self):
        if self.length_filter is not None and self.length_filter <= 0:
            raise ConfigError(f"length_filter must be > 0, got {self.length_filter}")
        if self.decoder not in ("mbr", "viterbi"):
            raise ConfigError(f"decoder must be mbr or viterbi, got {self.decoder!r}")
        if self.strategy not in lexicon_mod.STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        env_dir = os.environ.get(OUTPUT_DIR_ENV)
        if env_dir:
            self.output_dir = env_dir

    def training_config(self, alpha=None) -> TrainingConfig:
        return TrainingConfig(
            alpha=self.alpha if alpha is None else alpha,
            d_z=self.d_z,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            rng_seed=self.model_seed,
            margin=self.margin,
        )

    def grammar_shape(self, vocab_size: int) -> GrammarShape:
        return GrammarShape(self.num_nonterminals, self.num_preterminals, vocab_size)

    def network_dims(self) -> NetworkDims:
        return NetworkDims(d_sym=self.d_sym, d_word=self.d_word, encoder_mode=self.encoder_mode)


def load_config(path, overrides=None) -> ExperimentConfig:
    """Read a JSON config; apply `key=value` overrides; check referenced paths."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})")
    cfg = config_from_dict(raw, overrides)
    for name in ("train_corpus", "dev_treebank", "image_vectors", "embeddings"):
        value = getattr(cfg, name)
        if value is not None and not os.path.exists(value):
            raise ConfigError(f"{name} path does not exist: {value}")
    return cfg


def config_from_dict(raw: dict, overrides=None) -> ExperimentConfig:
    known = {f.name: f.type for f in fields(ExperimentConfig)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
    merged = dict(raw)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, value = item.split("=", 1)
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        merged[key] = _coerce(key, value)
    return ExperimentConfig(**merged)


def _coerce(key, text):
    hints = {f.name: f.default for f in fields(ExperimentConfig)}
    if text.lower() in ("null", "none"):
        return None
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    default = hints.get(key)
    if isinstance(default, bool):
        raise ConfigError(f"{key} expects true/false, got {text!r}")
    for cast in (int, float):
        if isinstance(default, cast) and default is not None:
            try:
                return cast(text)
            except ValueError:
                raise ConfigError(f"{key} expects {cast.__name__}, got {text!r}")
    if key in ("length_filter", "clip_grad_norm"):
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"{key} expects a number, got {text!r}")
    return text


def clip_gradients(grads: dict, max_norm: float) -> float:
    """Scale the whole gradient dict to a global L2 norm cap; returns the norm."""
    total = torch.sqrt(sum((g * g).sum() for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g.mul_(scale)
    return float(total)


def stable_seed(*parts) -> int:
    return zlib.crc32(":".join(str(p) for p in parts).encode())


# ---------------------------------------------------------------------------
# Corpus assembly

@dataclass
class TrainItem:
    sent_id: str
    sentence: Sentence
    image: np.ndarray = None

    def __len__(self):
        return len(self.sentence)


def _read_any_corpus(path):
    """(token lists, ids); bracketed treebanks and plaintext both accepted."""
    with open(path, "r", encoding="utf-8") as fh:
        head = fh.read(64).lstrip()
    if head.startswith("("):
        bank = treebank_mod.read_treebank(path)
        return [e.raw_tokens for e in bank], [e.sent_id for e in bank]
    sents, ids, _ = treebank_mod.read_token_lines(path)
    return sents, ids


def build_train_vocabulary(config: ExperimentConfig) -> lexicon_mod.Vocabulary:
    sents, _ids = _read_any_corpus(config.train_corpus)
    return lexicon_mod.build_vocabulary(sents, config.vocab_size, lowercase=config.lowercase)


def _initial_embedding_table(config, vocab):
    """Training-time word embeddings: pretrained rows where available,
    seeded random rows elsewhere. Returns (EmbeddingTable or None)."""
    if not config.embeddings:
        return None
    pretrained = lexicon_mod.load_embeddings(config.embeddings, expected_dim=config.d_word)
    rng = np.random.default_rng(stable_seed("train-emb", config.model_seed))
    rows, tags = [], []
    for w in vocab.itos[:-1]:
        if w in pretrained:
            rows.append(np.asarray(pretrained[w], dtype=float))
            tags.append("pretrained")
        else:
            rows.append(rng.uniform(-0.1, 0.1, size=config.d_word))
            tags.append("random")
    if lexicon_mod.UNK in pretrained:
        rows.append(np.asarray(pretrained[lexicon_mod.UNK], dtype=float))
        tags.append("unk-shared")
    else:
        rows.append(rng.uniform(-0.1, 0.1, size=config.d_word))
        tags.append("random")
    return lexicon_mod.EmbeddingTable(np.stack(rows), tags)


def load_train_items(config: ExperimentConfig, vocab) -> list:
    sents, ids = _read_any_corpus(config.train_corpus)
    images = {}
    if config.image_vectors:
        images = grounding_mod.load_image_vectors(config.image_vectors)
    items = []
    for tokens, sent_id in zip(sents, ids):
        if config.lowercase:
            tokens = [t.lower() for t in tokens]
        if len(tokens) < 2:
            continue  # single-token sentences are rejected by training
        sent = Sentence(vocab.encode(tokens), raw_tokens=tokens, sent_id=sent_id)
        items.append(TrainItem(sent_id, sent, images.get(sent_id)))
    if config.length_filter is not None:
        items = treebank_mod.filter_by_length(items, config.length_filter)
    if not items:
        raise DataError(f"{config.train_corpus}: no usable training sentences")
    if config.alpha > 0 and not any(it.image is not None for it in items):
        raise ConfigError("alpha > 0 but no image vectors are paired with the corpus")
    return items


# ---------------------------------------------------------------------------
# Decoding helpers

def _latent_means(params: ParameterSet, sentences):
    """Per-sentence encoder means, or None when the latent is disabled."""
    if params.d_z == 0:
        return None
    return _encode_batch(params, sentences)[:, : params.d_z]


def parse_sentences(params: ParameterSet, sentences, decoder: str = "mbr"):
    """Decode a list of sentences; returns list of (SpanSet, log_marginal).

    Length-1 sentences yield an empty span set and no log probability. The
    latent vector, when enabled, is fixed to the encoder mean (no sampling).
    """
    results = [None] * len(sentences)
    with torch.no_grad():
        z_all = _latent_means(params, sentences)
        groups = {}
        for idx, sent in enumerate(sentences):
            if len(sent) < 2:
                results[idx] = (SpanSet([], n=len(sent)), None)
                continue
            groups.setdefault(len(sent), []).append(idx)
        for n in sorted(groups):
            idxs = groups[n]
            if z_all is not None:
                z_g = z_all[torch.tensor(idxs, dtype=torch.long)]
                start_b, binary_b, preterm_b = scores_to_log_probs(*rule_scores(params, z_g))
            else:
                s1, b1, p1 = scores_to_log_probs(*rule_scores(params, None))
                g = len(idxs)
                start_b = s1.unsqueeze(0).expand(g, -1)
                binary_b = b1.unsqueeze(0).expand(g, -1, -1, -1)
                preterm_b = p1.unsqueeze(0).expand(g, -1, -1)
            tok = torch.tensor([sentences[i].tokens for i in idxs], dtype=torch.long)
            pre_cols = torch.gather(
                preterm_b, 2, tok.unsqueeze(1).expand(-1, preterm_b.shape[1], -1)
            ).transpose(1, 2)
            beta, logz = chart.inside_fill(start_b, binary_b, pre_cols)
            if decoder == "mbr":
                alpha = chart.outside_fill(start_b, binary_b, beta)
                posts = chart.posterior_cells(alpha, beta, logz)
                for pos, idx in enumerate(idxs):
                    table = chart.PosteriorTable(posts[pos], n)
                    tree = chart.mbr_decode(table)
                    results[idx] = (tree_to_spans(tree), logz[pos].item())
            elif decoder == "viterbi":
                for pos, idx in enumerate(idxs):
                    rt = RuleTable(start_b[pos], binary_b[pos], preterm_b[pos])
                    tree, _lp = chart.viterbi_decode(rt, sentences[idx])
                    results[idx] = (tree_to_spans(tree), logz[pos].item())
            else:
                raise ConfigError(f"unknown decoder {decoder!r}")
    return results


def dev_sentence_f1(params: ParameterSet, bank, vocab, decoder: str = "mbr") -> float:
    """Mean sentence F1 of decoded trees against a gold treebank (training
    vocabulary, Direct semantics)."""
    sentences = [
        Sentence(vocab.encode(e.raw_tokens), raw_tokens=e.raw_tokens, sent_id=e.sent_id)
        for e in bank
    ]
    decoded = parse_sentences(params, sentences, decoder)
    records = [
        eval_mod.EvalRecord(e.sent_id, len(e.raw_tokens), spans, e.gold_spans())
        for e, (spans, _lp) in zip(bank, decoded)
    ]
    return eval_mod.corpus_f1(records).sentence_f1


# ---------------------------------------------------------------------------
# Training

@dataclass
class TrainResult:
    checkpoint_path: str
    loss_lines: list
    order_lines: list
    s_f1: float  # dev S-F1, selection-aware (nan when no dev set)
    init_digest: str
    order_digest: str
    params: ParameterSet = None


def run_train(config: ExperimentConfig, resume_from=None, quiet=True) -> TrainResult:
    """Train per the config; write loss/order logs and per-epoch checkpoints.

    TrainResult.s_f1 is the dev-treebank score: final epoch by default, or the
    best select-treebank epoch's dev score when a selection split is set.
    """
    os.makedirs(config.checkpoint_dir, exist_ok=True)
    vocab = build_train_vocabulary(config)
    items = load_train_items(config, vocab)
    dev_bank = treebank_mod.read_treebank(config.dev_treebank) if config.dev_treebank else None
    select_bank = (treebank_mod.read_treebank(config.select_treebank)
                   if config.select_treebank else None)
    tcfg = config.training_config()

    emb_table = _initial_embedding_table(config, vocab)
    start_epoch = 0
    loss_lines, order_lines = [], []
    if resume_from:
        params, opt_state, extra = load_checkpoint(resume_from)
        start_epoch = extra["epoch"]
        if extra["vocab"] != vocab.itos:
            raise ConfigError("resume checkpoint was built with a different vocabulary")
    else:
        params = ParameterSet.init(
            config.grammar_shape(len(vocab)),
            config.network_dims(),
            d_z=config.d_z,
            d_img=config.d_img,
            model_seed=config.model_seed,
            word_embeddings=None if emb_table is None else emb_table.matrix,
            frozen_words=config.freeze_embeddings and emb_table is not None,
        )
        opt_state = AdamState.fresh()
    init_digest = params.digest()

    ids = [it.sent_id for it in items]
    for epoch in range(start_epoch, config.max_epochs):
        order = list(range(len(items)))
        random.Random(stable_seed("order", config.data_seed, epoch)).shuffle(order)
        order_lines.append(f"{epoch}\t" + ",".join(ids[i] for i in order))

        epoch_loss = dict(lm_loss=0.0, kl_term=0.0, grounding_loss=0.0, total=0.0)
        num_batches = 0
        for b0 in range(0, len(order), tcfg.batch_size):
            idxs = order[b0 : b0 + tcfg.batch_size]
            batch = [(items[i].sentence, items[i].image) for i in idxs]
            noise_seed = stable_seed("noise", config.model_seed, epoch, b0)
            breakdown, grads = loss_and_gradients(
                params, batch, tcfg, noise_seed, batch_id=f"e{epoch}b{b0}"
            )
            if config.clip_grad_norm:
                clip_gradients(grads, config.clip_grad_norm)
            params, opt_state = update_parameters(params, grads, opt_state, tcfg)
            for key in epoch_loss:
                epoch_loss[key] += getattr(breakdown, key)
            num_batches += 1
        for key in epoch_loss:
            epoch_loss[key] /= num_batches

        entry = {"epoch": epoch, **epoch_loss}
        if dev_bank is not None:
            entry["dev_s_f1"] = dev_sentence_f1(params, dev_bank, vocab, config.decoder)
        if select_bank is not None:
            entry["select_s_f1"] = dev_sentence_f1(params, select_bank, vocab, config.decoder)
        loss_lines.append(json.dumps(entry))
        if not quiet:
            print(loss_lines[-1])
        if config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            _save(config, params, opt_state, vocab, emb_table, epoch + 1,
                  os.path.join(config.checkpoint_dir, f"epoch_{epoch + 1}.pt"))

    final_path = os.path.join(config.checkpoint_dir, "final.pt")
    _save(config, params, opt_state, vocab, emb_table, config.max_epochs, final_path)

    with open(os.path.join(config.checkpoint_dir, "loss_log.jsonl"), "a" if resume_from else "w",
              encoding="utf-8") as fh:
        fh.writelines(line + "\n" for line in loss_lines)
    with open(os.path.join(config.checkpoint_dir, "order_log.tsv"), "a" if resume_from else "w",
              encoding="utf-8") as fh:
        fh.writelines(line + "\n" for line in order_lines)

    s_f1 = float("nan")
    if dev_bank is not None and loss_lines:
        entries = [json.loads(line) for line in loss_lines]
        if select_bank is not None:
            # model selection on the select split, reported score from dev
            best = max(entries, key=lambda e: e["select_s_f1"])
            s_f1 = best["dev_s_f1"]
        else:
            s_f1 = entries[-1]["dev_s_f1"]
    order_digest = f"{zlib.crc32(chr(10).join(order_lines).encode()):08x}"
    return TrainResult(final_path, loss_lines, order_lines, s_f1, init_digest,
                       order_digest, params)


def _save(config, params, opt_state, vocab, emb_table, epoch, path):
    extra = {
        "epoch": epoch,
        "vocab": vocab.itos,
        "vocab_counts": vocab.counts,
        "source_tags": None if emb_table is None else list(emb_table.source_tags),
        "config": asdict(config),
    }
    save_checkpoint(path, params, opt_state, extra)


# ---------------------------------------------------------------------------
# Parsing (zero-shot transfer entry point; never reads image vectors)

def run_parse(checkpoint_path, corpus_path, out_path, strategy: str = None,
              embeddings_path: str = None, target_vocab_corpus: str = None,
              decoder: str = None, vocab_size: int = None):
    params, _opt, extra = load_checkpoint(checkpoint_path)
    saved_cfg = config_from_dict(extra["config"])
    strategy = strategy or saved_cfg.strategy
    decoder = decoder or saved_cfg.decoder
    vocab_size = vocab_size or saved_cfg.vocab_size
    if strategy not in lexicon_mod.STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}")

    train_vocab = lexicon_mod.Vocabulary(extra["vocab"][:-1], extra["vocab_counts"])
    tags = extra["source_tags"] or ["learned"] * len(train_vocab)
    learned = lexicon_mod.EmbeddingTable(
        params.tensors["word_embeddings"].numpy().copy(), tags
    )

    tokens_list, ids = _read_any_corpus(corpus_path)
    if saved_cfg.lowercase:
        tokens_list = [[t.lower() for t in toks] for toks in tokens_list]

    if strategy == "Direct":
        active, table = train_vocab, learned
    else:
        if target_vocab_corpus:
            target_sents, _ = _read_any_corpus(target_vocab_corpus)
        else:
            target_sents = tokens_list
        target_vocab = lexicon_mod.build_vocabulary(target_sents, vocab_size,
                                                    lowercase=saved_cfg.lowercase)
        pretrained = {}
        emb_path = embeddings_path or saved_cfg.embeddings
        if emb_path:
            pretrained = lexicon_mod.load_embeddings(emb_path, expected_dim=params.dims.d_word)
        active, table, _report = lexicon_mod.select_embeddings(
            strategy, train_vocab, target_vocab, pretrained, learned,
            rng_seed=stable_seed("select", strategy, saved_cfg.model_seed),
        )
    test_params = params.with_word_embeddings(table.matrix, len(active))

    sentences = [
        Sentence(active.encode(toks), raw_tokens=toks, sent_id=sent_id)
        for toks, sent_id in zip(tokens_list, ids)
    ]
    decoded = parse_sentences(test_params, sentences, decoder)
    with open(out_path, "w", encoding="utf-8") as fh:
        for sent, (spans, logp) in zip(sentences, decoded):
            fh.write(json.dumps({
                "id": sent.sent_id,
                "tokens": sent.raw_tokens,
                "spans": sorted([i, j] for i, j in spans.spans),
                "logp": logp,
            }) + "\n")
    return out_path


@dataclass
class PredictionRecord:
    sent_id: str
    tokens: list
    spans: SpanSet
    logp: float

    def __len__(self):
        return len(self.tokens)


def read_predictions(path) -> list:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: bad JSON ({exc})")
            n = len(obj["tokens"])
            records.append(PredictionRecord(
                obj["id"], obj["tokens"],
                SpanSet([(i, j) for i, j in obj["spans"]], n=n), obj.get("logp"),
            ))
    if not records:
        raise DataError(f"{path}: no predictions")
    return records


# ---------------------------------------------------------------------------
# Evaluation / analysis drivers

def _align(preds, bank):
    pred_by_id = {p.sent_id: p for p in preds}
    gold_ids = [e.sent_id for e in bank]
    gold_id_set = set(gold_ids)
    missing = [g for g in gold_ids if g not in pred_by_id]
    extra = [p for p in pred_by_id if p not in gold_id_set]
    if missing or extra:
        raise DataError(
            f"prediction/gold mismatch; missing={missing[:5]} extra={extra[:5]} "
            f"({len(missing)} missing, {len(extra)} extra)"
        )
    return [(pred_by_id[e.sent_id], e) for e in bank]


def eval_records(preds, bank, vocab=None) -> list:
    records = []
    for pred, entry in _align(preds, bank):
        if len(pred.tokens) != len(entry.raw_tokens):
            raise DataError(
                f"sentence {entry.sent_id}: prediction has {len(pred.tokens)} tokens, "
                f"gold has {len(entry.raw_tokens)}"
            )
        unk = 0
        if vocab is not None:
            unk = sum(1 for t in entry.raw_tokens if t not in vocab)
        records.append(eval_mod.EvalRecord(
            entry.sent_id, len(entry.raw_tokens), pred.spans, entry.gold_spans(),
            unknown_count=unk,
        ).score())
    return records


def run_evaluate(pred_path, gold_path, vocab_path=None, out_prefix=None):
    preds = read_predictions(pred_path)
    bank = treebank_mod.read_treebank(gold_path)
    vocab = lexicon_mod.Vocabulary.load(vocab_path) if vocab_path else None
    records = eval_records(preds, bank, vocab)
    report = eval_mod.corpus_f1(records)
    if out_prefix:
        with open(out_prefix + ".json", "w", encoding="utf-8") as fh:
            json.dump({
                "corpus_f1": report.corpus_f1,
                "corpus_precision": report.corpus_precision,
                "corpus_recall": report.corpus_recall,
                "sentence_f1": report.sentence_f1,
                "tp": report.tp, "fp": report.fp, "fn": report.fn,
                "num_sentences": report.num_sentences,
            }, fh, indent=2, sort_keys=True)
            fh.write("\n")
        with open(out_prefix + "_by_length.csv", "w", encoding="utf-8") as fh:
            fh.write("length,num_sentences,mean_s_f1\n")
            for n, (cnt, mean) in report.by_length.items():
                fh.write(f"{n},{cnt},{mean:.6f}\n")
    return report, records


def run_analyze_overlap(train_path, test_path, vocab_path=None, out_path=None):
    unk_vocab = lexicon_mod.Vocabulary.load(vocab_path) if vocab_path else None
    train_inv = analysis_mod.extract_factors(treebank_mod.read_treebank(train_path), unk_vocab)
    test_inv = analysis_mod.extract_factors(treebank_mod.read_treebank(test_path), unk_vocab)
    report = analysis_mod.overlap_rates(train_inv, test_inv)
    if out_path:
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write(analysis_mod.overlap_report_to_csv(report))
    return report


def run_analyze_errors(pred_path, gold_path, vocab_path, bucket_width: int, out_path=None):
    preds = read_predictions(pred_path)
    bank = treebank_mod.read_treebank(gold_path)
    vocab = lexicon_mod.Vocabulary.load(vocab_path) if vocab_path else None
    records = eval_records(preds, bank, vocab)
    table = analysis_mod.error_buckets(records, bucket_width)
    if out_path:
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write(analysis_mod.error_buckets_to_csv(table))
    return table


def run_significance(config: ExperimentConfig, conditions, num_seeds: int, out_prefix=None):
    """Controlled-randomness study on the configured corpus.

    V-RM trains with the configured alpha (> 0, grounded); RM and RM+RD train
    text-only. Runs are scored by dev S-F1 (selection-aware, see run_train).
    """
    if config.dev_treebank is None:
        raise ConfigError("significance protocol needs a dev treebank to score runs")
    if "V-RM" in conditions:
        if config.alpha <= 0:
            raise ConfigError("V-RM requires alpha > 0 in the config")
        if not config.image_vectors:
            raise ConfigError("V-RM requires image vectors paired with the corpus")

    def train_fn(model_seed, data_seed, grounded):
        run_cfg = config_from_dict({**asdict(config)})
        run_cfg.model_seed = model_seed
        run_cfg.data_seed = data_seed
        run_cfg.alpha = config.alpha if grounded else 0.0
        if not grounded:
            run_cfg.image_vectors = None
            run_cfg.d_img = 0
        run_cfg.checkpoint_dir = os.path.join(
            config.checkpoint_dir, f"sig_{'v' if grounded else 'c'}_m{model_seed}_d{data_seed}"
        )
        result = run_train(run_cfg)
        return analysis_mod.RunRecord(
            condition="", seed_index=-1, model_seed=model_seed, data_seed=data_seed,
            s_f1=result.s_f1, init_digest=result.init_digest, order_digest=result.order_digest,
        )

    table = analysis_mod.seed_experiment_protocol(
        train_fn, conditions, num_seeds, base_model_seed=config.model_seed,
        base_data_seed=config.data_seed + 1000,
    )
    tests = {}
    for pair in (("RM", "RM+RD"), ("V-RM", "RM")):
        if pair[0] in conditions and pair[1] in conditions:
            t, p, mean, std = table.paired(pair[0], pair[1])
            tests[f"{pair[0]}_vs_{pair[1]}"] = {
                "t": t, "p": p, "mean_diff": mean, "std_diff": std,
            }
    if out_prefix:
        with open(out_prefix + "_scores.csv", "w", encoding="utf-8") as fh:
            fh.write(analysis_mod.score_table_to_csv(table))
        with open(out_prefix + "_tests.json", "w", encoding="utf-8") as fh:
            json.dump(tests, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return table, tests


# ---------------------------------------------------------------------------
# Synthetic corpus generation

def generate_synthetic_corpus(out_dir, num_train: int, num_test: int, max_length: int = 10,
                              num_nonterminals: int = 3, num_preterminals: int = 4,
                              vocab_size: int = 20, grammar_seed: int = 12345,
                              concentration: float = 2.0, image_noise: float = 0.0,
                              image_seed: int = 777, table: RuleTable = None,
                              num_dev: int = 0):
    """Sample a grammar (seeded random, or a supplied table) and write
    train[/dev]/test text, gold trees, and structure-derived image vectors
    (nonterminal count bags)."""
    os.makedirs(out_dir, exist_ok=True)
    if table is None:
        shape = GrammarShape(num_nonterminals, num_preterminals, vocab_size)
        table = RuleTable.random_normalized(shape, seed=grammar_seed,
                                            concentration=concentration)
    num_nonterminals = table.shape.num_nonterminals
    total = num_train + num_dev + num_test
    samples = sample_corpus(table, total, max_length, rng_seed=grammar_seed + 1)
    splits = {"train": samples[:num_train],
              "test": samples[num_train + num_dev:]}
    if num_dev:
        splits["dev"] = samples[num_train:num_train + num_dev]
    img_rng = np.random.default_rng(image_seed)
    paths = {}
    for split, pairs in splits.items():
        text_path = os.path.join(out_dir, f"{split}.txt")
        tree_path = os.path.join(out_dir, f"{split}_gold.mrg")
        with open(text_path, "w", encoding="utf-8") as ft, \
                open(tree_path, "w", encoding="utf-8") as fg:
            for k, (sent, tree) in enumerate(pairs):
                ft.write(f"{k}\t" + " ".join(sent.raw_tokens) + "\n")
                fg.write(tree_to_bracket(tree, sent.raw_tokens) + "\n")
        paths[split] = (text_path, tree_path)
        if split == "train" and image_noise >= 0 and image_seed is not None:
            vec_path = os.path.join(out_dir, "train_images.tsv")
            vectors = {}
            for k, (_sent, tree) in enumerate(pairs):
                bag = np.zeros(num_nonterminals)
                stack = [tree.root]
                while stack:
                    node = stack.pop()
                    if node.is_leaf:
                        continue
                    if node.symbol is not None:
                        bag[node.symbol] += 1.0
                    stack.append(node.left)
                    stack.append(node.right)
                vectors[str(k)] = bag + img_rng.normal(0.0, image_noise, size=num_nonterminals)
            grounding_mod.write_image_vectors(vec_path, vectors)
            paths["images"] = vec_path
    return paths, table
