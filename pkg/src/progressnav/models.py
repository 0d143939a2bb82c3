"""Tiny instruction-conditioned sequence models.

Two networks share the same transformer family (d=64, 2 blocks, 4 heads):
the progress reasoner decodes completed-instruction tokens from the visual
history, and the policy predicts K action distributions conditioned on the
instruction plus the decoded progress segment.  All graphs are built on
`diffcore` so analytic gradients are checkable against finite differences.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .serial import canonical_json, sha256_hex
from .world import ACTION_TOKENS, FEATURE_DIM, INSTR_WORDS


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    n_heads: int = 4
    n_blocks: int = 2
    d_ff: int = 128
    history_len: int = 8
    k_actions: int = 3
    max_pos: int = 96
    extra_decode: int = 8  # decode cap is |I| + extra_decode

    def to_dict(self) -> dict:
        return {
            "d": self.d, "n_heads": self.n_heads, "n_blocks": self.n_blocks,
            "d_ff": self.d_ff, "history_len": self.history_len,
            "k_actions": self.k_actions, "max_pos": self.max_pos,
            "extra_decode": self.extra_decode,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(**d)


class Vocab:
    """Instruction vocabulary with EOS/PAD; action vocabulary is ACTION_TOKENS."""

    def __init__(self):
        self.tokens = tuple(INSTR_WORDS) + ("<EOS>", "<PAD>")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        self.eos_id = self.index["<EOS>"]
        self.pad_id = self.index["<PAD>"]

    @property
    def size(self) -> int:
        return len(self.tokens)

    def encode(self, words) -> list[int]:
        return [self.index[w] for w in words]

    def decode(self, ids) -> list[str]:
        return [self.tokens[i] for i in ids]


@dataclass
class TokenSeq:
    tokens: list[int]
    logprobs: np.ndarray  # per-token (EOS term included for decoded sequences)

    @property
    def total_logprob(self) -> float:
        return float(np.sum(self.logprobs))


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = np.max(z)
    return z - m - np.log(np.sum(np.exp(z - m)))


# --- parameter plumbing -------------------------------------------------------

class ParamSet:
    """Named parameter leaves with deterministic init and byte-exact checkpoints."""

    CHECKPOINT_MAGIC = b"PNAVCK01"

    def __init__(self, leaves: dict[str, dc.Leaf], meta: dict):
        self.leaves = leaves
        self.meta = meta

    def __getitem__(self, name: str) -> dc.Leaf:
        return self.leaves[name]

    def names(self) -> list[str]:
        return sorted(self.leaves)

    def copy_values(self) -> dict[str, np.ndarray]:
        return {k: v.value.copy() for k, v in self.leaves.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for k, v in values.items():
            self.leaves[k].value = np.asarray(v, dtype=np.float64).copy()

    def n_params(self) -> int:
        return sum(v.value.size for v in self.leaves.values())

    def to_bytes(self) -> bytes:
        header = {
            "version": 1,
            "meta": self.meta,
            "arrays": [{"name": k, "shape": list(self.leaves[k].value.shape)}
                       for k in self.names()],
        }
        hjson = canonical_json(header).encode("utf-8")
        blob = b"".join(np.ascontiguousarray(self.leaves[k].value, dtype="<f8").tobytes()
                        for k in self.names())
        return self.CHECKPOINT_MAGIC + struct.pack("<I", len(hjson)) + hjson + blob

    @classmethod
    def from_bytes(cls, data: bytes) -> "ParamSet":
        import json

        if data[:8] != cls.CHECKPOINT_MAGIC:
            raise ValueError("bad checkpoint magic")
        hlen = struct.unpack("<I", data[8:12])[0]
        header = json.loads(data[12:12 + hlen].decode("utf-8"))
        if header["version"] != 1:
            raise ValueError(f"unsupported checkpoint version {header['version']}")
        off = 12 + hlen
        leaves = {}
        for spec in header["arrays"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(data[off:off + 8 * count], dtype="<f8").reshape(shape).copy()
            off += 8 * count
            leaves[spec["name"]] = dc.Leaf(spec["name"], arr)
        if off != len(data):
            raise ValueError("trailing bytes in checkpoint")
        return cls(leaves, header["meta"])

    def checkpoint_hash(self) -> str:
        return sha256_hex(self.to_bytes())

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ParamSet":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def _init_block(leaves, rng, prefix, d, d_ff, cross: bool):
    def w(name, shape, scale=0.02):
        leaves[f"{prefix}.{name}"] = dc.Leaf(f"{prefix}.{name}", rng.normal(0, scale, shape))

    def ones(name, n):
        leaves[f"{prefix}.{name}"] = dc.Leaf(f"{prefix}.{name}", np.ones(n))

    def zeros(name, n):
        leaves[f"{prefix}.{name}"] = dc.Leaf(f"{prefix}.{name}", np.zeros(n))

    for nm in ("wq", "wk", "wv", "wo"):
        w(nm, (d, d))
    ones("ln1_g", d)
    zeros("ln1_b", d)
    if cross:
        for nm in ("cq", "ck", "cv", "co"):
            w(nm, (d, d))
        ones("lnc_g", d)
        zeros("lnc_b", d)
    w("w1", (d, d_ff))
    zeros("b1", d_ff)
    w("w2", (d_ff, d))
    zeros("b2", d)
    ones("ln2_g", d)
    zeros("ln2_b", d)


def _causal_mask(n: int) -> np.ndarray:
    m = np.zeros((n, n))
    m[np.triu_indices(n, k=1)] = -1e9
    return m


def _attention(leaves, prefix, x, memory, n_heads, d, mask, cross: bool):
    """Multi-head attention graph; `memory` is x itself when not cross."""
    dh = d // n_heads
    tag = "c" if cross else "w"
    q_all = dc.matmul(x, leaves[f"{prefix}.{tag}q"])
    k_all = dc.matmul(memory, leaves[f"{prefix}.{tag}k"])
    v_all = dc.matmul(memory, leaves[f"{prefix}.{tag}v"])
    heads = []
    scale = 1.0 / np.sqrt(dh)
    for h in range(n_heads):
        sl = (slice(None), slice(h * dh, (h + 1) * dh))
        q = dc.getitem(q_all, sl)
        k = dc.getitem(k_all, sl)
        v = dc.getitem(v_all, sl)
        scores = dc.mul(dc.matmul(q, dc.transpose(k)), scale)
        if mask is not None:
            scores = dc.add(scores, dc.Constant(mask))
        att = dc.softmax(scores)
        heads.append(dc.matmul(att, v))
    cat = dc.concat(heads, axis=1)
    return dc.matmul(cat, leaves[f"{prefix}.{tag}o"])


def _block(leaves, prefix, x, n_heads, d, mask=None, memory=None):
    h = x
    normed = dc.layer_norm(h, leaves[f"{prefix}.ln1_g"], leaves[f"{prefix}.ln1_b"])
    h = dc.add(h, _attention(leaves, prefix, normed, normed, n_heads, d, mask, cross=False))
    if memory is not None:
        normed = dc.layer_norm(h, leaves[f"{prefix}.lnc_g"], leaves[f"{prefix}.lnc_b"])
        h = dc.add(h, _attention(leaves, prefix, normed, memory, n_heads, d,
                                 mask=None, cross=True))
    normed = dc.layer_norm(h, leaves[f"{prefix}.ln2_g"], leaves[f"{prefix}.ln2_b"])
    m = dc.add_rowvec(dc.matmul(normed, leaves[f"{prefix}.w1"]), leaves[f"{prefix}.b1"])
    m = dc.add_rowvec(dc.matmul(dc.relu(m), leaves[f"{prefix}.w2"]), leaves[f"{prefix}.b2"])
    return dc.add(h, m)


# --- progress reasoning module -------------------------------------------------

class ProgressModel:
    """Encoder over visual history + autoregressive instruction-token decoder."""

    def __init__(self, config: ModelConfig, vocab: Vocab, params: ParamSet):
        self.config = config
        self.vocab = vocab
        self.params = params

    @classmethod
    def init(cls, config: ModelConfig, vocab: Vocab, seed: int) -> "ProgressModel":
        rng = np.random.default_rng(np.random.SeedSequence([seed, 101]))
        d, ff, V = config.d, config.d_ff, vocab.size
        leaves: dict[str, dc.Leaf] = {}

        def w(name, shape, scale=0.02):
            leaves[name] = dc.Leaf(name, rng.normal(0, scale, shape))

        w("obs_w", (FEATURE_DIM, d))
        leaves["obs_b"] = dc.Leaf("obs_b", np.zeros(d))
        w("enc_pos", (config.history_len + 1, d))
        for b in range(config.n_blocks):
            _init_block(leaves, rng, f"enc.b{b}", d, ff, cross=False)
        leaves["enc_lnf_g"] = dc.Leaf("enc_lnf_g", np.ones(d))
        leaves["enc_lnf_b"] = dc.Leaf("enc_lnf_b", np.zeros(d))
        w("tok_emb", (V, d))
        w("dec_pos", (config.max_pos, d))
        for b in range(config.n_blocks):
            _init_block(leaves, rng, f"dec.b{b}", d, ff, cross=True)
        leaves["dec_lnf_g"] = dc.Leaf("dec_lnf_g", np.ones(d))
        leaves["dec_lnf_b"] = dc.Leaf("dec_lnf_b", np.zeros(d))
        w("out_w", (d, V))
        leaves["out_b"] = dc.Leaf("out_b", np.zeros(V))
        # scalar completion-ratio head (numeric progress-variant studies)
        w("prog_w", (d, 1))
        leaves["prog_b"] = dc.Leaf("prog_b", np.zeros(1))
        meta = {"kind": "prm", "config": config.to_dict(), "seed": seed}
        return cls(config, vocab, ParamSet(leaves, meta))

    @classmethod
    def from_paramset(cls, params: ParamSet) -> "ProgressModel":
        return cls(ModelConfig.from_dict(params.meta["config"]), Vocab(), params)

    # graphs ------------------------------------------------------------------

    def memory_graph(self, feats: np.ndarray) -> dc.Node:
        """Encode the visual history (S, FEATURE_DIM) -> (S, d)."""
        L = self.params
        S = feats.shape[0]
        x = dc.add_rowvec(dc.matmul(dc.Constant(feats), L["obs_w"]), L["obs_b"])
        x = dc.add(x, dc.getitem(L["enc_pos"], (slice(0, S), slice(None))))
        for b in range(self.config.n_blocks):
            x = _block(L.leaves, f"enc.b{b}", x, self.config.n_heads, self.config.d)
        return dc.layer_norm(x, L["enc_lnf_g"], L["enc_lnf_b"])

    def decoder_logits_graph(self, memory: dc.Node, token_ids: list[int]) -> dc.Node:
        """Teacher-forced logits (len(token_ids), V); position p sees tokens < p."""
        L = self.params
        n = len(token_ids)
        inputs = [self.vocab.pad_id] + list(token_ids[:-1])  # PAD doubles as BOS
        x = dc.gather(L["tok_emb"], inputs)
        x = dc.add(x, dc.getitem(L["dec_pos"], (slice(0, n), slice(None))))
        mask = _causal_mask(n)
        for b in range(self.config.n_blocks):
            x = _block(L.leaves, f"dec.b{b}", x, self.config.n_heads, self.config.d,
                       mask=mask, memory=memory)
        x = dc.layer_norm(x, L["dec_lnf_g"], L["dec_lnf_b"])
        return dc.add_rowvec(dc.matmul(x, L["out_w"]), L["out_b"])

    def teacher_logits_graph(self, feats: np.ndarray, token_ids: list[int]) -> dc.Node:
        if len(token_ids) > self.config.max_pos:
            raise ValueError(f"instruction length {len(token_ids)} exceeds decoder capacity")
        return self.decoder_logits_graph(self.memory_graph(feats), token_ids)

    def sequence_logprob_graph(self, feats: np.ndarray, token_ids: list[int]) -> dc.Node:
        """log F_p(tokens, EOS | history) as a scalar graph (for ratio terms)."""
        ids = list(token_ids) + [self.vocab.eos_id]
        logits = self.teacher_logits_graph(feats, ids)
        ce = dc.cross_entropy_from_logits(logits, ids)
        return dc.neg(dc.sum_(ce))

    def progress_scalar_graph(self, feats: np.ndarray) -> dc.Node:
        """Mean-pooled completion-ratio head (numeric progress variant)."""
        L = self.params
        mem = self.memory_graph(feats)
        pooled = dc.mean(mem, axis=0)
        return dc.sum_(dc.add(dc.matmul(pooled, L["prog_w"]), L["prog_b"]))

    # numpy-space inference -----------------------------------------------------

    def decode(self, feats: np.ndarray, mode: str = "greedy", temperature: float = 1.0,
               rng: np.random.Generator | None = None, max_len: int | None = None) -> TokenSeq:
        """Autoregressive decode; stops at EOS or the length cap.

        Per-token log-probs are under the untempered model distribution (the
        quantity the co-finetuning ratio needs); `temperature` shapes sampling
        only.
        """
        if mode == "sample":
            if temperature <= 0:
                raise ValueError("temperature must be > 0 when sampling")
            if rng is None:
                raise ValueError("sampling requires an rng")
        cap = self.config.max_pos - 1 if max_len is None else min(max_len, self.config.max_pos - 1)
        memory = dc.Constant(dc.evaluate(self.memory_graph(feats)))
        tokens: list[int] = []
        logprobs: list[float] = []
        while len(tokens) < cap:
            logits_node = self.decoder_logits_graph(memory, tokens + [self.vocab.pad_id])
            logits = dc.evaluate(logits_node)[-1]
            logp = _log_softmax(logits)
            if mode == "greedy":
                nxt = int(np.argmax(logits))
            else:
                p = np.exp(_log_softmax(logits / temperature))
                p = p / p.sum()
                nxt = int(rng.choice(len(p), p=p))
            logprobs.append(float(logp[nxt]))
            if nxt == self.vocab.eos_id:
                return TokenSeq(tokens=tokens, logprobs=np.array(logprobs))
            tokens.append(nxt)
        # cap reached: account for no-EOS by scoring the forced stop position
        logits_node = self.decoder_logits_graph(memory, tokens + [self.vocab.pad_id])
        logits = dc.evaluate(logits_node)[-1]
        logprobs.append(float(_log_softmax(logits)[self.vocab.eos_id]))
        return TokenSeq(tokens=tokens, logprobs=np.array(logprobs))


# --- progress-guided policy ----------------------------------------------------

class PolicyModel:
    """Self-attention over [history | instruction | progress | K queries]."""

    N_SEGMENTS = 4

    def __init__(self, config: ModelConfig, vocab: Vocab, params: ParamSet):
        self.config = config
        self.vocab = vocab
        self.params = params

    @classmethod
    def init(cls, config: ModelConfig, vocab: Vocab, seed: int) -> "PolicyModel":
        rng = np.random.default_rng(np.random.SeedSequence([seed, 202]))
        d, ff, V = config.d, config.d_ff, vocab.size
        leaves: dict[str, dc.Leaf] = {}

        def w(name, shape, scale=0.02):
            leaves[name] = dc.Leaf(name, rng.normal(0, scale, shape))

        w("obs_w", (FEATURE_DIM, d))
        leaves["obs_b"] = dc.Leaf("obs_b", np.zeros(d))
        w("tok_emb", (V, d))
        w("pos", (config.max_pos, d))
        w("seg", (cls.N_SEGMENTS, d))
        w("query", (config.k_actions, d))
        for b in range(config.n_blocks):
            _init_block(leaves, rng, f"pol.b{b}", d, ff, cross=False)
        leaves["lnf_g"] = dc.Leaf("lnf_g", np.ones(d))
        leaves["lnf_b"] = dc.Leaf("lnf_b", np.zeros(d))
        w("act_w", (d, len(ACTION_TOKENS)))
        leaves["act_b"] = dc.Leaf("act_b", np.zeros(len(ACTION_TOKENS)))
        meta = {"kind": "policy", "config": config.to_dict(), "seed": seed}
        return cls(config, vocab, ParamSet(leaves, meta))

    @classmethod
    def from_paramset(cls, params: ParamSet) -> "PolicyModel":
        return cls(ModelConfig.from_dict(params.meta["config"]), Vocab(), params)

    def logits_graph(self, feats: np.ndarray, instr_ids: list[int],
                     progress_ids: list[int]) -> dc.Node:
        """K rows of action logits; `progress_ids` may be empty."""
        L = self.params
        cfg = self.config
        S = feats.shape[0]
        n_i, n_p = len(instr_ids), len(progress_ids)
        total = S + n_i + n_p + cfg.k_actions
        if total > cfg.max_pos:
            raise ValueError(f"policy input length {total} exceeds capacity {cfg.max_pos}")
        obs = dc.add_rowvec(dc.matmul(dc.Constant(feats), L["obs_w"]), L["obs_b"])
        parts = [obs, dc.gather(L["tok_emb"], instr_ids)]
        seg_ids = [0] * S + [1] * n_i
        if n_p:
            parts.append(dc.gather(L["tok_emb"], progress_ids))
            seg_ids += [2] * n_p
        parts.append(L["query"])
        seg_ids += [3] * cfg.k_actions
        x = dc.concat(parts, axis=0)
        x = dc.add(x, dc.getitem(L["pos"], (slice(0, total), slice(None))))
        x = dc.add(x, dc.gather(L["seg"], seg_ids))
        for b in range(cfg.n_blocks):
            x = _block(L.leaves, f"pol.b{b}", x, cfg.n_heads, cfg.d)
        x = dc.layer_norm(x, L["lnf_g"], L["lnf_b"])
        out = dc.getitem(x, (slice(total - cfg.k_actions, total), slice(None)))
        return dc.add_rowvec(dc.matmul(out, L["act_w"]), L["act_b"])

    def logprob_graph(self, feats, instr_ids, progress_ids, action_ids) -> dc.Node:
        """Scalar log pi(actions | inputs) under the factorized K-step head."""
        if len(action_ids) != self.config.k_actions:
            raise ValueError(f"expected {self.config.k_actions} actions, got {len(action_ids)}")
        logits = self.logits_graph(feats, instr_ids, progress_ids)
        return dc.neg(dc.sum_(dc.cross_entropy_from_logits(logits, action_ids)))

    def distributions(self, feats, instr_ids, progress_ids) -> np.ndarray:
        """K normalized categorical rows (numpy, no gradients)."""
        logits = dc.evaluate(self.logits_graph(feats, instr_ids, progress_ids))
        m = np.max(logits, axis=-1, keepdims=True)
        e = np.exp(logits - m)
        return e / e.sum(axis=-1, keepdims=True)

    def greedy_actions(self, feats, instr_ids, progress_ids) -> list[int]:
        logits = dc.evaluate(self.logits_graph(feats, instr_ids, progress_ids))
        return [int(i) for i in np.argmax(logits, axis=-1)]

    def sample_actions(self, feats, instr_ids, progress_ids,
                       rng: np.random.Generator) -> tuple[list[int], float]:
        """Sample K actions; returns (ids, total log-prob under the model)."""
        dists = self.distributions(feats, instr_ids, progress_ids)
        ids, lp = [], 0.0
        for row in dists:
            a = int(rng.choice(len(row), p=row / row.sum()))
            ids.append(a)
            lp += float(np.log(row[a]))
        return ids, lp
