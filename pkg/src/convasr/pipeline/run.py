"""End-to-end flow: LM training, rescoring, confusion networks, combination, scoring.

Every stage writes its artifacts under ``out_dir/<stage>/`` and a manifest
``out_dir/manifests/<n>_<stage>.json`` recording the SHA-256 of each input
and output file plus the hash of the previous manifest, so editing any
artifact after the fact breaks the chain.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor

from ..combine import (SystemSet, apply_two_stage, build_confusion_network, cn_decode,
                       combination_report, group_name, two_stage_combine, write_cns)
from ..errors import ConvAsrError, InvalidConfig, IoError, ManifestMismatch, StageError
from ..lm import (InterpolationSpec, RnnLMConfig, UniformLM, build_vocab, perplexity,
                  train_ngram, train_recurrent_lm, write_corpus)
from ..rescore import (AM, NEURAL_BWD, NEURAL_FWD, NGRAM, OOV_COUNT, WORD_COUNT, LmBundle,
                       NBestList, ScoreWeights, add_lm_features, dev_wer, one_best,
                       optimize_weights, write_nbest)
from ..score import comparison_tables, rate_table, score_corpus
from .config import PipelineConfig
from .synth import gen_synthetic, load_world, stream

STAGE_ORDER = ("data", "lm", "rescore", "cn", "combine", "score", "tables")
RNN_VARIANTS = (("fwd", "forward", "one-hot"), ("fwd", "forward", "letter-trigram"),
                ("bwd", "backward", "one-hot"), ("bwd", "backward", "letter-trigram"))


# ---- manifests -------------------------------------------------------------

def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _canonical(d):
    return json.dumps(d, sort_keys=True, separators=(",", ":")).encode()


def _files_under(root, base):
    out = []
    for dirpath, _, files in os.walk(root):
        for f in files:
            out.append(os.path.relpath(os.path.join(dirpath, f), base))
    return sorted(out)


def write_manifest(out_dir, index, stage, inputs, outputs, params, prev):
    body = {
        "stage": stage,
        "params": params,
        "inputs": {p: sha256_file(os.path.join(out_dir, p)) for p in sorted(inputs)},
        "outputs": {p: sha256_file(os.path.join(out_dir, p)) for p in sorted(outputs)},
        "prev": prev,
    }
    body["hash"] = hashlib.sha256(_canonical(body)).hexdigest()
    os.makedirs(os.path.join(out_dir, "manifests"), exist_ok=True)
    with open(os.path.join(out_dir, "manifests", f"{index}_{stage}.json"), "w",
              encoding="utf-8") as f:
        f.write(json.dumps(body, indent=2, sort_keys=True) + "\n")
    return body["hash"]


def verify_manifest(out_dir):
    """Check every manifest's file hashes and the chain; returns the stages verified."""
    mdir = os.path.join(out_dir, "manifests")
    if not os.path.isdir(mdir):
        raise ManifestMismatch(f"no manifests under {out_dir}")
    names = sorted(os.listdir(mdir), key=lambda n: int(n.split("_", 1)[0]))
    prev = None
    stages = []
    for name in names:
        with open(os.path.join(mdir, name), encoding="utf-8") as f:
            m = json.load(f)
        body = {k: v for k, v in m.items() if k != "hash"}
        if hashlib.sha256(_canonical(body)).hexdigest() != m.get("hash"):
            raise ManifestMismatch(f"{name}: manifest content was altered")
        if m["prev"] != prev:
            raise ManifestMismatch(f"{name}: chain broken")
        for kind in ("inputs", "outputs"):
            for p, digest in m[kind].items():
                full = os.path.join(out_dir, p)
                if not os.path.exists(full) or sha256_file(full) != digest:
                    raise ManifestMismatch(f"{name}: {kind[:-1]} {p} changed")
        prev = m["hash"]
        stages.append(m["stage"])
    return stages


# ---- helpers -----------------------------------------------------------------

def assert_disjoint(world):
    dev = {u.utt_id for u in world.splits["dev"]}
    ev = {u.utt_id for u in world.splits["eval"]}
    if dev & ev:
        raise InvalidConfig(f"dev and eval share utterances: {sorted(dev & ev)[:5]}")
    dev_t = {u.features.tobytes() for u in world.splits["dev"]}
    if any(u.features.tobytes() in dev_t for u in world.splits["eval"]):
        raise InvalidConfig("dev and eval share feature data")


def _train_rnn(args):
    in_domain, out_domain, validation, vocab, cfg = args
    return train_recurrent_lm(in_domain, out_domain, cfg, validation=validation, vocab=vocab)


def _rnn_config(cfg, direction, encoding, tag):
    seed = int(stream(cfg.seed, f"lm/rnn/{tag}").integers(2 ** 31))
    base = dict(cfg.lm.rnn)
    unknown = set(base) - set(RnnLMConfig.__dataclass_fields__)
    if unknown:
        raise InvalidConfig(f"unknown recurrent LM keys {sorted(unknown)}")
    base.update(direction=direction, encoding=encoding, seed=seed,
                min_count=cfg.lm.min_count)
    return RnnLMConfig(**base)


def _dump(path, obj):
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")


class _Run:
    def __init__(self, cfg, world=None):
        self.cfg = cfg
        self.out = cfg.out_dir
        self.world = world
        self.prev = None
        self.index = 0
        self.report = {}
        self.bundle = None
        self.lists = {}       # (system, split) -> rescored NBestList list
        self.weights = {}     # system -> ScoreWeights
        self.cns = {}         # (system, split) -> {utt: CN}
        self.combined = {}    # split -> {utt: CN}

    def _lists(self, system, split):
        if (system, split) in self.lists:
            return self.lists[(system, split)]
        n = self.cfg.rescore.nbest
        return [NBestList(nb.utt_id, nb.hypotheses[:n], nb.source_system)
                for nb in self.world.nbest[(system, split)]]

    def path(self, *parts):
        p = os.path.join(self.out, *parts)
        os.makedirs(os.path.dirname(p), exist_ok=True)
        return p

    def rel(self, p):
        return os.path.relpath(p, self.out)

    def stage(self, name, fn, params):
        try:
            inputs, outputs = fn()
        except StageError:
            raise
        except ConvAsrError as e:
            raise StageError(name, e) from e
        except OSError as e:
            raise StageError(name, IoError(str(e))) from e
        self.prev = write_manifest(self.out, self.index, name, [self.rel(p) for p in inputs],
                                   [self.rel(p) for p in outputs], params, self.prev)
        self.index += 1
        self._last_outputs = outputs
        return outputs

    # ---- stages ------------------------------------------------------------
    def data(self):
        cfg = self.cfg
        if cfg.data_dir:
            self.world = load_world(cfg.data_dir)
            base = cfg.data_dir
            files = [os.path.join(base, p) for p in _files_under(base, base)]
            inputs, outputs = [], []
            # data lives outside out_dir: record hashes through copies of the index files
            for p in files:
                if p.endswith(("references.txt", "world.json")) or "/nbest/" in p:
                    dst = self.path("data", os.path.relpath(p, base))
                    with open(p, "rb") as fi, open(dst, "wb") as fo:
                        fo.write(fi.read())
                    outputs.append(dst)
        else:
            wdir = self.path("data", "world.json")
            self.world = gen_synthetic(cfg.world, os.path.dirname(wdir))
            base = os.path.dirname(wdir)
            inputs = []
            outputs = [os.path.join(base, p) for p in _files_under(base, base)]
        assert_disjoint(self.world)
        w = self.world
        self.report["world"] = {"systems": list(w.systems), "words": len(w.words),
                                "senones": len(w.senones),
                                "utterances": {s: len(u) for s, u in sorted(w.splits.items())}}
        return inputs, outputs

    def lm(self):
        cfg, w = self.cfg, self.world
        texts = w.texts
        vocab = build_vocab(texts["in_domain"] + texts["out_domain"], cfg.lm.min_count)
        words = vocab[:-2]
        ng_f = train_ngram(texts["in_domain"], cfg.lm.ngram_order, vocab=words)
        ng_b = train_ngram(texts["in_domain"], cfg.lm.ngram_order, vocab=words,
                           direction="backward")
        uni = train_ngram(texts["in_domain"], 1, vocab=words)
        jobs = []
        for tag, direction, encoding in RNN_VARIANTS:
            rc = _rnn_config(cfg, direction, encoding, f"{tag}/{encoding}")
            jobs.append((texts["in_domain"], texts["out_domain"], texts["validation"], vocab, rc))
        if cfg.jobs > 1:
            with ProcessPoolExecutor(min(cfg.jobs, len(jobs))) as ex:
                trained = list(ex.map(_train_rnn, jobs))
        else:
            trained = [_train_rnn(j) for j in jobs]
        outputs = []
        for name, lm_ in (("ngram.fwd.arpa", ng_f), ("ngram.bwd.arpa", ng_b)):
            p = self.path("lm", name)
            lm_.write_arpa(p)
            outputs.append(p)
        rnn_report = {}
        models = {}
        for (tag, _, encoding), (model, trace) in zip(RNN_VARIANTS, trained):
            key = f"rnn.{tag}.{encoding}"
            p = self.path("lm", key + ".json")
            model.save(p)
            outputs.append(p)
            models[(tag, encoding)] = model
            rnn_report[key] = {"best_valid_ppl": trace.best_valid_ppl,
                               "best_epoch": trace.best_epoch}
        spec = InterpolationSpec(cfg.lm.interpolation)
        self.bundle = LmBundle(
            ng_f,
            (models[("fwd", "one-hot")], models[("fwd", "letter-trigram")], ng_f),
            (models[("bwd", "one-hot")], models[("bwd", "letter-trigram")], ng_b),
            spec, frozenset(words))
        valid = texts["validation"]
        ppl = {"uniform": perplexity(UniformLM(words), valid),
               "unigram": perplexity(uni, valid),
               f"ngram_order{cfg.lm.ngram_order}": perplexity(ng_f, valid)}
        self.report["lm"] = {"vocab_size": len(vocab), "validation_ppl": ppl, "rnn": rnn_report}
        p = self.path("lm", "vocab.txt")
        write_corpus(p, [[v] for v in vocab])
        outputs.append(p)
        p = self.path("lm", "report.json")
        _dump(p, self.report["lm"])
        outputs.append(p)
        return [], outputs

    def rescore(self):
        cfg, w = self.cfg, self.world
        keys = [(s, sp) for s in w.systems for sp in ("dev", "eval")]
        raw = {k: self._lists(*k) for k in keys}
        if self.bundle is not None:
            flat = [nb for k in keys for nb in raw[k]]
            scored = iter(add_lm_features(flat, self.bundle))
            self.lists = {k: [next(scored) for _ in raw[k]] for k in keys}
        else:
            self.lists = raw
        refs = w.references("dev")
        base = [AM, NGRAM, WORD_COUNT, OOV_COUNT]
        per_sys = {}
        outputs = []
        for s in w.systems:
            dev = [(nb, refs[nb.utt_id]) for nb in self.lists[(s, "dev")]]
            entry = {"am_only": dev_wer(dev, {AM: 1.0}),
                     "oracle": _corpus_oracle(dev)}
            if self.bundle is None:
                final = ScoreWeights({AM: 1.0})
            else:
                g = cfg.rescore
                w_ng = optimize_weights(dev, init={AM: 1.0, NGRAM: 1.0}, grid=g.grid,
                                        sweeps=g.sweeps, features=base)
                entry["ngram"] = dev_wer(dev, w_ng)
                entry["ngram_weights"] = dict(w_ng)
                final = w_ng
                if g.neural:
                    full = optimize_weights(dev, init={**w_ng, NEURAL_FWD: 0.0, NEURAL_BWD: 0.0},
                                            grid=g.grid, sweeps=g.sweeps)
                    cold = optimize_weights(dev, init={AM: 1.0, NGRAM: 1.0, NEURAL_FWD: 1.0,
                                                       NEURAL_BWD: 1.0}, grid=g.grid,
                                            sweeps=g.sweeps, features=base + [NEURAL_FWD,
                                                                             NEURAL_BWD])
                    entry["full"] = dev_wer(dev, full)
                    entry["full_cold_start"] = dev_wer(dev, cold)
                    entry["full_weights"] = dict(full)
                    final = full
            self.weights[s] = final
            p = self.path("rescore", f"{s}.weights.json")
            final.write(p)
            outputs.append(p)
            for sp in ("dev", "eval"):
                p = self.path("rescore", f"{s}.{sp}.jsonl")
                write_nbest(p, self.lists[(s, sp)])
                outputs.append(p)
            per_sys[s] = entry
        self.report["rescore_dev_wer"] = per_sys
        p = self.path("rescore", "report.json")
        _dump(p, per_sys)
        outputs.append(p)
        return [], outputs

    def cn(self):
        cfg, w = self.cfg, self.world
        outputs = []
        for s in w.systems:
            for sp in ("dev", "eval"):
                wts = self.weights.get(s, ScoreWeights({AM: 1.0}))
                cns = [build_confusion_network(nb, cfg.combine.posterior_scale, wts)
                       for nb in self._lists(s, sp)]
                self.cns[(s, sp)] = {c.utt_id: c for c in cns}
                p = self.path("cn", f"{s}.{sp}.jsonl")
                write_cns(p, cns)
                outputs.append(p)
        return [], outputs

    def combine(self):
        cfg, w = self.cfg, self.world
        if not self.cns:
            raise InvalidConfig("combination needs the cn stage")
        groups = cfg.combine.groups or tuple((s,) for s in w.systems)
        unknown = {s for g in groups for s in g} - set(w.systems)
        if unknown:
            raise InvalidConfig(f"unknown systems in groups: {sorted(unknown)}")

        def sets(split, refs):
            return [SystemSet({s: self.cns[(s, split)] for s in g}, refs) for g in groups]

        res = two_stage_combine(sets("dev", w.references("dev")), cfg.combine.ladder,
                                cfg.combine.estimate_weights)
        self.combined["dev"] = apply_two_stage(res, sets("dev", None))
        self.combined["eval"] = apply_two_stage(res, sets("eval", None))
        sel = res.selection
        self.report["combination"] = {
            "groups": [group_name(g) for g in groups], "selected": sel.selected,
            "weights": list(sel.weights.weights), "dev_wer_trace": sel.trace}
        outputs = []
        p = self.path("combine", "report.txt")
        with open(p, "w", encoding="utf-8") as f:
            f.write(combination_report(sel))
        outputs.append(p)
        for sp in ("dev", "eval"):
            p = self.path("combine", f"combined.{sp}.jsonl")
            write_cns(p, [self.combined[sp][u] for u in sorted(self.combined[sp])])
            outputs.append(p)
        p = self.path("combine", "selection.json")
        _dump(p, self.report["combination"])
        outputs.append(p)
        return [], outputs

    def score(self):
        w = self.world
        refs = w.references("eval")
        reports, alignments, oracle = {}, {}, {}
        for s in w.systems:
            wts = self.weights.get(s, ScoreWeights({AM: 1.0}))
            lists = self._lists(s, "eval")
            hyps = {nb.utt_id: list(one_best(nb, wts).words) for nb in lists}
            reports[s], alignments[s] = score_corpus(refs, hyps)
            oracle[s] = _corpus_oracle([(nb, refs[nb.utt_id]) for nb in lists])
        if self.combined:
            hyps = {u: cn_decode(c) for u, c in self.combined["eval"].items()}
            reports["combined"], alignments["combined"] = score_corpus(refs, hyps)
        self.alignments = alignments
        self.eval_reports = reports
        self.report["eval_wer"] = {n: r.wer for n, r in reports.items()}
        self.report["eval_oracle_wer"] = oracle
        p = self.path("score", "eval_wer.txt")
        with open(p, "w", encoding="utf-8") as f:
            f.write(rate_table(reports))
        p2 = self.path("score", "report.json")
        _dump(p2, {"eval_wer": self.report["eval_wer"], "eval_oracle_wer": oracle,
                   "detail": {n: r.to_dict() for n, r in reports.items()}})
        return [], [p, p2]

    def tables(self):
        singles = [s for s in self.world.systems]
        best = min(singles, key=lambda s: (self.eval_reports[s].wer, s))
        sets = {best: self.alignments[best]}
        if "combined" in self.alignments:
            sets["combined"] = self.alignments["combined"]
        tabs = comparison_tables(sets)
        p = self.path("tables", "errors.txt")
        with open(p, "w", encoding="utf-8") as f:
            for k in ("substitutions", "deletions", "insertions"):
                f.write(tabs[k] + "\n")
        return [], [p]


def _corpus_oracle(pairs):
    """Corpus-level oracle WER: best hypothesis per utterance, errors pooled."""
    from ..score import error_count, normalize
    errs = sum(min(error_count(ref, h.words) for h in nb.hypotheses) for nb, ref in pairs)
    n = sum(len(normalize(ref)) for _, ref in pairs)
    return 100.0 * errs / max(n, 1)


def run_pipeline(config=None, world=None):
    """Run every enabled stage in order; returns the report dict.

    Writes ``report.json`` and ``report.txt`` at the top of ``out_dir``.
    Failures are re-raised as StageError naming the stage; files written
    by earlier stages stay in place.
    """
    cfg = config or PipelineConfig()
    if not isinstance(cfg, PipelineConfig):
        cfg = PipelineConfig.from_dict(cfg)
    os.makedirs(cfg.out_dir, exist_ok=True)
    mdir = os.path.join(cfg.out_dir, "manifests")
    if os.path.isdir(mdir):
        for n in os.listdir(mdir):
            os.remove(os.path.join(mdir, n))
    r = _Run(cfg, world)
    with open(os.path.join(cfg.out_dir, "config.json"), "w", encoding="utf-8") as f:
        f.write(cfg.to_json())
    block = cfg.to_dict()
    r.stage("data", r.data, {"world": block["world"], "data_dir": cfg.data_dir is not None})
    prev_out = r._last_outputs
    for name in STAGE_ORDER[1:]:
        if not cfg.stages.enabled(name):
            continue
        if name == "tables" and not cfg.stages.score:
            raise StageError(name, InvalidConfig("error tables need the score stage"))
        fn = getattr(r, name)

        def wrapped(fn=fn, prev_out=prev_out):
            inputs, outputs = fn()
            return list(inputs) + list(prev_out), outputs

        prev_out = r.stage(name, wrapped, block.get(name, {}))
    report = dict(sorted(r.report.items()))
    with open(os.path.join(cfg.out_dir, "report.json"), "w", encoding="utf-8") as f:
        f.write(json.dumps(report, indent=2, sort_keys=True) + "\n")
    with open(os.path.join(cfg.out_dir, "report.txt"), "w", encoding="utf-8") as f:
        f.write(format_report(report))
    return report


def format_report(report):
    lines = []
    if "lm" in report:
        lines.append("Validation perplexity")
        rows = list(report["lm"]["validation_ppl"].items())
        rows += [(k, v["best_valid_ppl"]) for k, v in report["lm"]["rnn"].items()]
        width = max(len(k) for k, _ in rows)
        lines.extend(f"  {k:<{width}} {v:8.3f}" for k, v in rows)
    if "rescore_dev_wer" in report:
        lines.append("Dev WER by rescoring configuration")
        for s, e in report["rescore_dev_wer"].items():
            cols = " ".join(f"{k}={e[k]:.2f}" for k in ("am_only", "ngram", "full", "oracle")
                            if k in e)
            lines.append(f"  {s:<8} {cols}")
    if "combination" in report:
        c = report["combination"]
        lines.append("Combination: " + " + ".join(c["selected"]) + "  weights "
                     + " ".join(f"{x:.4f}" for x in c["weights"]))
    if "eval_wer" in report:
        lines.append("Eval WER")
        for k, v in report["eval_wer"].items():
            lines.append(f"  {k:<10} {v:6.2f}")
    return "\n".join(lines) + "\n"


def config_with(cfg, **blocks):
    """Copy of ``cfg`` with whole blocks replaced by dicts of overrides."""
    kw = {}
    for name, over in blocks.items():
        cur = getattr(cfg, name)
        kw[name] = dataclasses.replace(cur, **over) if dataclasses.is_dataclass(cur) else over
    return dataclasses.replace(cfg, **kw)
