"""Neural parameterization of rule tables, the joint training loss, and Adam.

Rule probabilities are produced by per-family scorers: a residual two-layer
perceptron transforms the parent-side symbol embedding (plus an optional
projection of the per-sentence latent vector), and the transformed vector is
dotted against child-side representations (pair encodings of child symbol
embeddings for binary rules, projected word embeddings for preterminal
rules). Row-wise log-softmax turns scores into a normalized RuleTable.

The language-model loss is the negative log marginal from the inside pass;
with a latent vector enabled it becomes the standard single-sample ELBO
(reconstruction plus KL), since the exact marginal over the latent is
intractable. Gradients come from reverse-mode accumulation through the chart
fills; the analytic expected-count identity in `chart` provides the
independent cross-check.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import torch

from . import grounding as grounding_mod
from .chart import inside_fill, outside_fill, posterior_cells
from .errors import ConfigError, StructuralError, TrainingFault
from .grammar import GrammarShape, RuleTable, Sentence

_DTYPE = torch.float64


@dataclass
class NetworkDims:
    """Width knobs for the scorer networks."""

    d_sym: int = 64
    d_word: int = 100
    encoder_mode: str = "mean"  # "mean" or "positional" (order-sensitive)


@dataclass
class TrainingConfig:
    alpha: float = 0.0
    d_z: int = 0
    learning_rate: float = 1e-3
    batch_size: int = 8
    max_epochs: int = 10
    rng_seed: int = 0
    margin: float = 0.2

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.d_z < 0:
            raise ConfigError(f"d_z must be >= 0, got {self.d_z}")


@dataclass
class LossBreakdown:
    lm_loss: float
    kl_term: float
    grounding_loss: float
    total: float


def _tensor_seed(model_seed: int, name: str) -> int:
    # name-keyed seeding keeps shared tensors identical across model variants
    return (model_seed * 0x9E3779B1 + zlib.crc32(name.encode())) % (2**63)


def _xavier(gen, fan_in, fan_out):
    a = (6.0 / (fan_in + fan_out)) ** 0.5
    return (torch.rand(fan_in, fan_out, generator=gen, dtype=_DTYPE) * 2 - 1) * a


class ParameterSet:
    """All trainable state of one model, as named float64 tensors.

    Word embeddings carry a frozen flag; frozen tensors receive zero gradient
    and are never touched by updates.
    """

    def __init__(self, shape: GrammarShape, dims: NetworkDims, d_z: int, d_img: int,
                 tensors: dict, frozen_words: bool):
        self.shape = shape
        self.dims = dims
        self.d_z = d_z
        self.d_img = d_img
        self.tensors = tensors
        self.frozen_words = frozen_words

    # canonical tensor order; families that are disabled simply have no entry
    @staticmethod
    def _names(d_z: int, d_img: int):
        names = ["symbol_embeddings", "word_embeddings"]
        for fam in ("start", "binary", "preterm"):
            names += [f"{fam}_w1", f"{fam}_b1", f"{fam}_w2", f"{fam}_b2"]
            if d_z > 0:
                names.append(f"{fam}_wz")
        names += ["pair_w1", "pair_b1", "pair_w2", "pair_b2", "word_proj"]
        if d_z > 0:
            names += ["enc_w", "enc_b"]
        if d_img > 0:
            names += ["ground_w", "ground_b"]
        return names

    @classmethod
    def init(cls, shape: GrammarShape, dims: NetworkDims, d_z: int = 0, d_img: int = 0,
             model_seed: int = 0, word_embeddings=None, frozen_words: bool = False):
        d = dims.d_sym
        nt, pt = shape.num_nonterminals, shape.num_preterminals
        sizes = {
            "symbol_embeddings": (nt + pt + 1, d),
            "word_embeddings": (shape.vocab_size, dims.d_word),
            "pair_w1": (2 * d, d), "pair_b1": (d,), "pair_w2": (d, d), "pair_b2": (d,),
            "word_proj": (dims.d_word, d),
        }
        for fam in ("start", "binary", "preterm"):
            sizes[f"{fam}_w1"] = (d, d)
            sizes[f"{fam}_b1"] = (d,)
            sizes[f"{fam}_w2"] = (d, d)
            sizes[f"{fam}_b2"] = (d,)
            if d_z > 0:
                sizes[f"{fam}_wz"] = (d_z, d)
        if d_z > 0:
            sizes["enc_w"] = (dims.d_word, 2 * d_z)
            sizes["enc_b"] = (2 * d_z,)
        if d_img > 0:
            sizes["ground_w"] = (dims.d_word, d_img)
            sizes["ground_b"] = (d_img,)

        tensors = {}
        for name in cls._names(d_z, d_img):
            size = sizes[name]
            gen = torch.Generator().manual_seed(_tensor_seed(model_seed, name))
            if name == "word_embeddings" and word_embeddings is not None:
                t = torch.as_tensor(word_embeddings, dtype=_DTYPE).clone()
                if tuple(t.shape) != size:
                    raise StructuralError(f"word embeddings shape {tuple(t.shape)} != {size}")
            elif name.endswith("_b1") or name.endswith("_b2") or name == "enc_b" or name == "ground_b":
                t = torch.zeros(size, dtype=_DTYPE)
            elif name == "symbol_embeddings":
                t = torch.randn(size, generator=gen, dtype=_DTYPE) * (1.0 / d ** 0.5)
            elif name == "word_embeddings":
                t = torch.randn(size, generator=gen, dtype=_DTYPE) * 0.1
            else:
                t = _xavier(gen, *size)
            tensors[name] = t
        return cls(shape, dims, d_z, d_img, tensors, frozen_words)

    @classmethod
    def zeros(cls, shape: GrammarShape, dims: NetworkDims, d_z: int = 0, d_img: int = 0,
              frozen_words: bool = False):
        ps = cls.init(shape, dims, d_z, d_img, model_seed=0, frozen_words=frozen_words)
        for t in ps.tensors.values():
            t.zero_()
        return ps

    def named_parameters(self):
        return {name: self.tensors[name] for name in self._names(self.d_z, self.d_img)}

    def is_frozen(self, name: str) -> bool:
        return name == "word_embeddings" and self.frozen_words

    def trainable_names(self):
        return [n for n in self._names(self.d_z, self.d_img) if not self.is_frozen(n)]

    def with_word_embeddings(self, matrix, vocab_size: int, frozen_words=None) -> "ParameterSet":
        """Swap the word-embedding table (e.g. after transfer-time selection)."""
        t = torch.as_tensor(matrix, dtype=_DTYPE).clone()
        if t.shape[1] != self.dims.d_word:
            raise StructuralError(f"embedding dim {t.shape[1]} != d_word {self.dims.d_word}")
        if t.shape[0] != vocab_size:
            raise StructuralError("embedding rows do not match the new vocabulary")
        tensors = dict(self.tensors)
        tensors["word_embeddings"] = t
        shape = GrammarShape(self.shape.num_nonterminals, self.shape.num_preterminals, vocab_size)
        frozen = self.frozen_words if frozen_words is None else frozen_words
        return ParameterSet(shape, self.dims, self.d_z, self.d_img, tensors, frozen)

    def digest(self) -> str:
        """Stable hex digest of all tensor contents (init/equality checks)."""
        h = 0
        for name in self._names(self.d_z, self.d_img):
            data = self.tensors[name].detach().numpy().tobytes()
            h = zlib.crc32(name.encode() + data, h)
        return f"{h:08x}"


# ---------------------------------------------------------------------------
# Scoring

def _residual_mlp(base, w1, b1, w2, b2):
    return base + torch.tanh(base @ w1 + b1) @ w2 + b2


def _family_transform(params: ParameterSet, fam: str, rows: torch.Tensor, z):
    """Apply one family's residual MLP to parent-side rows; z may be None.

    rows [R, d_sym] and z None -> [R, d_sym]; with z [B, d_z] -> [B, R, d_sym].
    """
    t = params.tensors
    base = rows
    if z is not None:
        if params.d_z == 0:
            raise ConfigError("latent vector given but d_z = 0")
        zp = z @ t[f"{fam}_wz"]
        base = rows.unsqueeze(0) + zp.unsqueeze(1) if z.dim() == 2 else rows + zp
    return _residual_mlp(base, t[f"{fam}_w1"], t[f"{fam}_b1"], t[f"{fam}_w2"], t[f"{fam}_b2"])


def rule_scores(params: ParameterSet, z=None):
    """Unnormalized rule scores (start [.., nt], binary [.., nt, S, S],
    preterm [.., pt, V]); a leading batch dim appears when z is [B, d_z]."""
    t = params.tensors
    nt = params.shape.num_nonterminals
    pt = params.shape.num_preterminals
    s = nt + pt
    emb = t["symbol_embeddings"]
    nt_emb, pt_emb, root_emb = emb[:nt], emb[nt : nt + pt], emb[nt + pt]

    h_start = _family_transform(params, "start", root_emb.unsqueeze(0), z)  # [.., 1, d]
    start_scores = (h_start @ nt_emb.T).squeeze(-2)

    pairs = torch.cat(
        [emb[:s].repeat_interleave(s, dim=0), emb[:s].repeat(s, 1)], dim=-1
    )  # [S*S, 2d], row y*S+z
    pair_rep = torch.tanh(pairs @ t["pair_w1"] + t["pair_b1"]) @ t["pair_w2"] + t["pair_b2"]
    h_bin = _family_transform(params, "binary", nt_emb, z)  # [.., nt, d]
    binary_scores = h_bin @ pair_rep.T  # [.., nt, S*S]
    binary_scores = binary_scores.reshape(*binary_scores.shape[:-1], s, s)

    word_rep = t["word_embeddings"] @ t["word_proj"]  # [V, d]
    h_pre = _family_transform(params, "preterm", pt_emb, z)
    preterm_scores = h_pre @ word_rep.T  # [.., pt, V]
    return start_scores, binary_scores, preterm_scores


def scores_to_log_probs(start_scores, binary_scores, preterm_scores):
    """Row-wise log-softmax; binary normalizes over all child pairs per parent."""
    start = torch.log_softmax(start_scores, dim=-1)
    flat = binary_scores.reshape(*binary_scores.shape[:-2], -1)
    binary = torch.log_softmax(flat, dim=-1).reshape(binary_scores.shape)
    preterm = torch.log_softmax(preterm_scores, dim=-1)
    return start, binary, preterm


def compute_rule_table(params: ParameterSet, z=None) -> RuleTable:
    """Normalized RuleTable for one sentence-level latent (or none)."""
    if z is not None:
        if params.d_z == 0:
            raise ConfigError("latent vector given but the model has d_z = 0")
        z = torch.as_tensor(z, dtype=_DTYPE)
        if z.dim() != 1 or z.shape[0] != params.d_z:
            raise StructuralError(f"z has shape {tuple(z.shape)}, expected ({params.d_z},)")
    with torch.no_grad():
        start, binary, preterm = scores_to_log_probs(*rule_scores(params, z))
    return RuleTable(start, binary, preterm)


def encode_latent(params: ParameterSet, sentence: Sentence):
    """(mu, logvar) of the per-sentence latent; deterministic in the input."""
    if params.d_z == 0:
        raise ConfigError("encode_latent requires d_z > 0")
    with torch.no_grad():
        mu_logvar = _encode_batch(params, [sentence])[0]
    d_z = params.d_z
    return mu_logvar[:d_z], mu_logvar[d_z:]


def _encode_batch(params: ParameterSet, sentences):
    t = params.tensors
    rows = []
    for sent in sentences:
        vecs = t["word_embeddings"][torch.tensor(sent.tokens, dtype=torch.long)]
        if params.dims.encoder_mode == "positional":
            w = torch.arange(1, len(sent) + 1, dtype=_DTYPE)
            pooled = (vecs * (w / w.sum()).unsqueeze(1)).sum(0)
        else:
            pooled = vecs.mean(0)
        rows.append(pooled)
    return torch.stack(rows) @ t["enc_w"] + t["enc_b"]  # [B, 2*d_z]


def kl_standard_normal(mu, logvar) -> float:
    """KL( N(mu, diag exp(logvar)) || N(0, I) ), closed form."""
    mu = torch.as_tensor(mu, dtype=_DTYPE)
    logvar = torch.as_tensor(logvar, dtype=_DTYPE)
    return 0.5 * (logvar.exp() + mu * mu - 1.0 - logvar).sum()


# ---------------------------------------------------------------------------
# Loss

def loss_and_gradients(params: ParameterSet, batch, config: TrainingConfig, rng_seed: int,
                       batch_id=None):
    """Joint loss over one mini-batch and gradients for every parameter.

    `batch` is a list of (Sentence, image-vector-or-None) pairs. Reparameterized
    latent draws use a generator seeded with `rng_seed`, so identical inputs
    give bit-identical results. Frozen tensors get zero gradients.
    """
    if not batch:
        raise StructuralError("empty batch")
    leaves = params.named_parameters()
    for name, t in leaves.items():
        t.grad = None
        if not params.is_frozen(name):
            t.requires_grad_(True)
    try:
        breakdown, total = _loss_forward(params, batch, config, rng_seed)
        if not torch.isfinite(total):
            raise TrainingFault(f"non-finite loss in batch {batch_id!r}: {breakdown}")
        total.backward()
        grads = {}
        for name, t in leaves.items():
            if t.grad is None:
                grads[name] = torch.zeros_like(t)
            else:
                grads[name] = t.grad.detach().clone()
    finally:
        for t in leaves.values():
            t.requires_grad_(False)
            t.grad = None
    return breakdown, grads


def _loss_forward(params: ParameterSet, batch, config: TrainingConfig, rng_seed: int):
    sentences = []
    for sent, _img in batch:
        if len(sent) < 2:
            raise StructuralError(f"training sentences need length >= 2, got {len(sent)}")
        sentences.append(sent)
    bsz = len(batch)
    nt = params.shape.num_nonterminals

    kl_mean = torch.zeros((), dtype=_DTYPE)
    if config.d_z > 0:
        enc = _encode_batch(params, sentences)
        mu, logvar = enc[:, : config.d_z], enc[:, config.d_z :]
        gen = torch.Generator().manual_seed(rng_seed)
        eps = torch.randn(bsz, config.d_z, generator=gen, dtype=_DTYPE)
        z_all = mu + torch.exp(0.5 * logvar) * eps
        kl_mean = 0.5 * (logvar.exp() + mu * mu - 1.0 - logvar).sum(dim=1).mean()
    else:
        z_all = None

    # group same-length sentences so the chart fill is batched
    groups = {}
    for idx, sent in enumerate(sentences):
        groups.setdefault(len(sent), []).append(idx)

    recon = [None] * bsz
    posts = [None] * bsz  # [n+1, n+1] posterior span tensors, grounded batches only
    need_posts = config.alpha > 0 and any(img is not None for _s, img in batch)
    for n in sorted(groups):
        idxs = groups[n]
        g = len(idxs)
        if z_all is not None:
            z_g = z_all[torch.tensor(idxs, dtype=torch.long)]
            start_b, binary_b, preterm_b = scores_to_log_probs(*rule_scores(params, z_g))
        else:
            start_1, binary_1, preterm_1 = scores_to_log_probs(*rule_scores(params, None))
            start_b = start_1.unsqueeze(0).expand(g, -1)
            binary_b = binary_1.unsqueeze(0).expand(g, -1, -1, -1)
            preterm_b = preterm_1.unsqueeze(0).expand(g, -1, -1)
        tok = torch.tensor([sentences[i].tokens for i in idxs], dtype=torch.long)  # [g, n]
        pre_cols = torch.gather(
            preterm_b, 2, tok.unsqueeze(1).expand(-1, preterm_b.shape[1], -1)
        ).transpose(1, 2)  # [g, n, pt]
        beta, logz = inside_fill(start_b, binary_b, pre_cols)
        for pos, idx in enumerate(idxs):
            recon[idx] = -logz[pos]
        if need_posts:
            alpha = outside_fill(start_b, binary_b, beta)
            post_g = posterior_cells(alpha, beta, logz)
            for pos, idx in enumerate(idxs):
                posts[idx] = post_g[pos]

    lm_mean = torch.stack(recon).mean()

    ground = torch.zeros((), dtype=_DTYPE)
    paired = [i for i, (_s, img) in enumerate(batch) if img is not None]
    if config.alpha > 0 and len(paired) >= 2:
        if params.d_img == 0:
            raise ConfigError("grounded loss requested but the model has no grounding head")
        images = torch.stack(
            [torch.as_tensor(batch[i][1], dtype=_DTYPE) for i in paired]
        )
        reps, cells = [], []
        for i in paired:
            word_vecs = params.tensors["word_embeddings"][
                torch.tensor(sentences[i].tokens, dtype=torch.long)
            ]
            sp = grounding_mod.all_span_representations(
                word_vecs, params.tensors["ground_w"], params.tensors["ground_b"]
            )
            reps.append(sp.reps)
            cells.append(sp.cells)
        score_matrix = grounding_mod.pairwise_match_scores(
            images, [posts[i] for i in paired], reps, cells
        )
        ground = grounding_mod.hinge_loss_t(score_matrix, config.margin)

    total = lm_mean + config.alpha * ground
    if config.d_z > 0:
        total = total + kl_mean
    breakdown = LossBreakdown(
        lm_loss=lm_mean.item(),
        kl_term=kl_mean.item(),
        grounding_loss=ground.item(),
        total=total.item(),
    )
    return breakdown, total


def batch_loss(params: ParameterSet, batch, config: TrainingConfig, rng_seed: int) -> LossBreakdown:
    """Loss only (no gradient collection); used by finite-difference oracles."""
    with torch.no_grad():
        breakdown, _total = _loss_forward(params, batch, config, rng_seed)
    return breakdown


# ---------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def fresh(cls):
        return cls()


def update_parameters(params: ParameterSet, grads: dict, opt_state: AdamState,
                      config: TrainingConfig, beta1: float = 0.9, beta2: float = 0.999,
                      eps: float = 1e-8):
    """One Adam step; returns (new params, new state). Frozen tensors shared."""
    new_tensors = {}
    new_m, new_v = {}, {}
    t = opt_state.step + 1
    lr = config.learning_rate
    for name, p in params.named_parameters().items():
        if params.is_frozen(name):
            new_tensors[name] = p
            continue
        if name not in grads:
            raise StructuralError(f"missing gradient for {name}")
        g = grads[name]
        if g.shape != p.shape:
            raise StructuralError(f"gradient shape mismatch for {name}")
        m = opt_state.m.get(name, torch.zeros_like(p))
        v = opt_state.v.get(name, torch.zeros_like(p))
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        new_tensors[name] = p - lr * m_hat / (v_hat.sqrt() + eps)
        new_m[name], new_v[name] = m, v
    out = ParameterSet(params.shape, params.dims, params.d_z, params.d_img,
                       new_tensors, params.frozen_words)
    return out, AdamState(step=t, m=new_m, v=new_v)


# ---------------------------------------------------------------------------
# Checkpoints

CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: ParameterSet, opt_state: AdamState = None, extra: dict = None):
    payload = {
        "version": CHECKPOINT_VERSION,
        "shape": (params.shape.num_nonterminals, params.shape.num_preterminals,
                  params.shape.vocab_size),
        "dims": {"d_sym": params.dims.d_sym, "d_word": params.dims.d_word,
                 "encoder_mode": params.dims.encoder_mode},
        "d_z": params.d_z,
        "d_img": params.d_img,
        "frozen_words": params.frozen_words,
        "tensors": {k: v.detach().clone() for k, v in params.tensors.items()},
        "opt_state": None if opt_state is None else {
            "step": opt_state.step,
            "m": dict(opt_state.m),
            "v": dict(opt_state.v),
        },
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path):
    """Returns (ParameterSet, AdamState-or-None, extra dict); bit-exact round trip."""
    payload = torch.load(path, weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {payload.get('version')!r}")
    shape = GrammarShape(*payload["shape"])
    dims = NetworkDims(**payload["dims"])
    params = ParameterSet(shape, dims, payload["d_z"], payload["d_img"],
                          payload["tensors"], payload["frozen_words"])
    opt = None
    if payload["opt_state"] is not None:
        opt = AdamState(step=payload["opt_state"]["step"], m=payload["opt_state"]["m"],
                        v=payload["opt_state"]["v"])
    return params, opt, payload["extra"]
