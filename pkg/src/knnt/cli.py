"""Command-line entry point tying the modules into reproducible pipelines.

One binary with subcommands; every command prints its resolved
configuration before doing work.  Exit codes: 0 success, 2 usage error
(argparse), 3 missing file or bad artifact header, 1 anything else
(including failed trend criteria under `reproduce`).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import adapter as ad
from . import datastore as dsmod
from . import lm as lmmod
from . import transducer as td
from .corpus import (SyntheticCorpusSpec, Utterance, Vocabulary, detokenize,
                     generate_corpus, load_features, load_questions,
                     load_token_lines, token_mask_to_word_mask, write_corpus)
from .evaluate import (make_row, markdown_table, score_corpus,
                       wer_entity_split, write_results_csv, WerReport)
from .modelio import (ADAPTER_MAGIC, LM_MAGIC, TRANSDUCER_MAGIC, load_model,
                      save_model)
from .params import FormatError
from .pipeline import PipelineSettings, reproduce_trends
from .training import TrainConfig, train_adapter, train_transducer

EXIT_FORMAT = 3


def _log_config(name: str, args: argparse.Namespace):
    resolved = {k: (str(v) if isinstance(v, Path) else v)
                for k, v in sorted(vars(args).items()) if k != "func"}
    print(f"config {name}: {json.dumps(resolved, sort_keys=True)}")


def _require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(str(p))
    return p


def _load_lm(path):
    header, store = load_model(_require(path), LM_MAGIC)
    return lmmod.LmConfig.from_header(header), store


def _load_transducer(path):
    header, store = load_model(_require(path), TRANSDUCER_MAGIC)
    return td.TransducerConfig.from_header(header), store


def _load_adapter(path):
    header, store = load_model(_require(path), ADAPTER_MAGIC)
    return ad.AdapterConfig.from_header(header), store


def _corpus_utterances(corpus_dir, which: str) -> list:
    base = _require(corpus_dir)
    if which in ("train", "val", "test"):
        return load_questions(base, which)
    vocab = Vocabulary.load(_require(base / "vocab.txt"))
    tokens = load_token_lines(_require(base / f"{which}.txt"), vocab)
    feats = load_features(_require(base / f"features.{which}.bin"))
    return [Utterance(tokens=t, entity_mask=np.zeros(len(t), dtype=np.int8),
                      feats=f) for t, f in zip(tokens, feats)]


def cmd_gen_corpus(args) -> int:
    spec = SyntheticCorpusSpec(
        seed=args.seed, sigma=args.sigma, num_entities=args.entities,
        contexts_per_entity=args.contexts_per_entity,
        num_train_questions=args.train, num_val_questions=args.val,
        num_test_questions=args.test, num_background=args.background)
    write_corpus(generate_corpus(spec), args.out)
    print(f"corpus written to {args.out}")
    return 0


def cmd_train_lm(args) -> int:
    vocab = Vocabulary.load(_require(args.vocab))
    corpus = load_token_lines(_require(args.text), vocab)
    config = lmmod.LmConfig(vocab_size=len(vocab), embed_dim=args.embed_dim,
                            hidden_dim=args.hidden_dim, num_layers=args.layers)
    store, losses = lmmod.train_lm(corpus, config, steps=args.steps,
                                   batch_size=args.batch_size, lr=args.lr,
                                   seed=args.seed,
                                   log=print if args.verbose else None)
    save_model(args.out, LM_MAGIC, config.header(), store)
    print(f"lm saved to {args.out} (final loss "
          f"{float(np.mean(losses[-20:])):.4f})")
    return 0


def cmd_build_datastore(args) -> int:
    config, store = _load_lm(args.lm)
    vocab = Vocabulary.load(_require(args.vocab))
    corpus = load_token_lines(_require(args.text), vocab)
    ds = dsmod.build_datastore(corpus, store, config, t=args.t,
                               source_tag=args.tag)
    dsmod.save_datastore(args.out, ds)
    print(f"datastore with {len(ds)} entries saved to {args.out}")
    return 0


def cmd_train_transducer(args) -> int:
    utts = _corpus_utterances(args.corpus, args.split)
    feature_dim = utts[0].feats.shape[1]
    vocab = Vocabulary.load(_require(Path(args.corpus) / "vocab.txt"))
    config = td.TransducerConfig(vocab_size=len(vocab),
                                 feature_dim=feature_dim)
    train = TrainConfig(seed=args.seed, steps=args.steps,
                        batch_size=args.batch_size, lr=args.lr)
    store, losses = train_transducer(utts, config, train,
                                     log=print if args.verbose else None)
    save_model(args.out, TRANSDUCER_MAGIC, config.header(), store)
    print(f"transducer saved to {args.out} (final loss "
          f"{float(np.mean(losses[-20:])):.4f})")
    return 0


def cmd_train_adapter(args) -> int:
    td_config, td_store = _load_transducer(args.transducer)
    lm_config = lm_store = ds = None
    if args.cand_encoder != "fixed":
        lm_config, lm_store = _load_lm(args.lm)
        ds = dsmod.load_datastore(_require(args.datastore))
    utts = _corpus_utterances(args.corpus, "train")
    ood = None
    if args.ood_prob > 0:
        ood = _corpus_utterances(args.corpus, "background")
        rng = np.random.default_rng(args.seed)
        ood = [ood[i] for i in rng.choice(len(ood), min(len(ood), 300),
                                          replace=False)]
    config = ad.AdapterConfig(
        vocab_size=td_config.vocab_size,
        query_dim=td_config.enc_out if args.side == "encoder"
        else td_config.pred_out,
        lm_hidden_dim=lm_config.hidden_dim if lm_config else 1,
        side=args.side, cand_encoder=args.cand_encoder)
    train = TrainConfig(seed=args.seed, steps=args.steps,
                        batch_size=args.batch_size, lr=args.lr,
                        k_train=args.k, sample_k=args.sample_k,
                        noise_prob=args.noise_prob, ood_prob=args.ood_prob)
    store, losses = train_adapter(config, train, td_store, td_config,
                                  lm_store, lm_config, utts, ds,
                                  ood_utterances=ood,
                                  log=print if args.verbose else None)
    save_model(args.out, ADAPTER_MAGIC, config.header(), store)
    print(f"adapter saved to {args.out} (final loss "
          f"{float(np.mean(losses[-20:])):.4f})")
    return 0


def _build_provider(args, lm_pair=None):
    if not args.adapter:
        return None
    a_config, a_store = _load_adapter(args.adapter)
    if a_config.cand_encoder == "fixed":
        return ad.RetrievalBiasProvider(a_store, a_config, None, None, None,
                                        k=args.k)
    lm_config, lm_store = lm_pair or _load_lm(args.lm)
    ds = dsmod.load_datastore(_require(args.datastore))
    return ad.RetrievalBiasProvider(a_store, a_config, lm_store, lm_config,
                                    ds, k=args.k,
                                    retrieve_every=args.retrieve_every)


def cmd_decode(args) -> int:
    td_config, td_store = _load_transducer(args.transducer)
    utts = _corpus_utterances(args.corpus, args.split)
    vocab = Vocabulary.load(_require(Path(args.corpus) / "vocab.txt"))
    provider = _build_provider(args)
    fusion = None
    if args.fusion_lm:
        f_config, f_store = _load_lm(args.fusion_lm)
        fusion = td.FusionLm(f_store, f_config, args.lam)
    lines = []
    for utt in utts:
        if args.beam > 0:
            nbest = td.decode_beam(td_store, td_config, utt.feats,
                                   beam=args.beam, bias_provider=provider,
                                   fusion=fusion)
            hyp = list(nbest[0][0])
        else:
            hyp = td.decode_greedy(td_store, td_config, utt.feats,
                                   bias_provider=provider)
        lines.append(" ".join(detokenize(vocab.decode(hyp))))
    out = Path(args.out)
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"{len(lines)} hypotheses written to {out}")
    return 0


def cmd_eval(args) -> int:
    refs = _require(args.ref).read_text(encoding="utf-8").splitlines()
    hyps = _require(args.hyp).read_text(encoding="utf-8").splitlines()
    if len(refs) != len(hyps):
        raise ValueError(f"ref has {len(refs)} lines, hyp has {len(hyps)}")
    masks = None
    if args.entities:
        masks = _require(args.entities).read_text(encoding="utf-8").splitlines()
        if len(masks) != len(refs):
            raise ValueError("entity mask line count differs from ref")
    total = WerReport()
    for i, (ref_line, hyp_line) in enumerate(zip(refs, hyps)):
        ref_tokens = ref_line.split()
        ref_words = detokenize(ref_tokens)
        hyp_words = detokenize(hyp_line.split())
        if masks is not None:
            mask = token_mask_to_word_mask(ref_tokens,
                                           [int(m) for m in masks[i].split()])
        else:
            mask = [0] * len(ref_words)
        total.add(wer_entity_split(ref_words, hyp_words, mask))
    print(f"wer {total.wer:.4f} entity_wer {total.entity_wer:.4f} "
          f"other_wer {total.other_wer:.4f} ref_words {total.ref_words}")
    return 0


def cmd_run_grid(args) -> int:
    grid = json.loads(_require(args.config).read_text(encoding="utf-8"))
    corpus_dir = grid["corpus"]
    split = grid.get("split", "test")
    utts = _corpus_utterances(corpus_dir, split)
    vocab = Vocabulary.load(_require(Path(corpus_dir) / "vocab.txt"))
    td_config, td_store = _load_transducer(grid["transducer"])
    rows = []
    skipped = []
    for cell in grid["cells"]:
        name = cell.get("name", "cell")
        try:
            ns = argparse.Namespace(
                adapter=cell.get("adapter"), lm=cell.get("lm") or grid.get("lm"),
                datastore=cell.get("datastore"), k=cell.get("k", 16),
                retrieve_every=cell.get("retrieve_every", 1))
            provider = _build_provider(ns)
            fusion = None
            lam = float(cell.get("lambda", 0.0))
            if cell.get("fusion_lm"):
                f_config, f_store = _load_lm(cell["fusion_lm"])
                fusion = td.FusionLm(f_store, f_config, lam)
            beam = int(cell.get("beam", 0))
            hyps = []
            for utt in utts:
                if beam > 0:
                    nbest = td.decode_beam(td_store, td_config, utt.feats,
                                           beam=beam, bias_provider=provider,
                                           fusion=fusion)
                    hyps.append(list(nbest[0][0]))
                else:
                    hyps.append(td.decode_greedy(td_store, td_config,
                                                 utt.feats,
                                                 bias_provider=provider))
            rep = score_corpus(vocab, utts, hyps)
            chash = hashlib.sha256(
                json.dumps(cell, sort_keys=True).encode()).hexdigest()[:10]
            rows.append(make_row(
                chash, cell.get("label", name),
                "lm" if fusion else "none", lam,
                cell.get("k_train", "-"), cell.get("k", "-") if provider
                else "-", cell.get("adaptee", "none"), split, rep,
                int(cell.get("seed", 0))))
            print(f"cell {name}: WER {rep.wer:.4f}")
        except (FileNotFoundError, FormatError) as exc:
            skipped.append((name, str(exc)))
            print(f"cell {name}: skipped ({exc})")
    write_results_csv(args.out, rows)
    md = markdown_table(
        ["cell", "WER", "entity WER", "other WER"],
        [[r["datastore"], r["wer"], r["entity_wer"], r["other_wer"]]
         for r in rows])
    Path(args.out).with_suffix(".md").write_text(md, encoding="utf-8")
    print(f"{len(rows)} rows written to {args.out}"
          + (f", {len(skipped)} cells skipped" if skipped else ""))
    return 0


def cmd_reproduce(args) -> int:
    settings = PipelineSettings.mini() if args.mini else PipelineSettings()
    result = reproduce_trends(args.out, settings=settings,
                              log=print if args.verbose else lambda m: None)
    failing = [c for c in result.criteria if not c.passed]
    for c in result.criteria:
        print(c.line())
    if failing:
        print(f"error: criteria: {len(failing)} failing, first: "
              f"criterion {failing[0].cid} ({failing[0].name})")
        return 1
    print(f"all {len(result.criteria)} criteria passed "
          f"in {result.elapsed / 60:.1f} min")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="knnt",
        description="Retrieval-augmented RNN transducer toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-corpus", help="generate the synthetic corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--sigma", type=float, default=0.3)
    g.add_argument("--entities", type=int, default=48)
    g.add_argument("--contexts-per-entity", type=int, default=6)
    g.add_argument("--train", type=int, default=600)
    g.add_argument("--val", type=int, default=150)
    g.add_argument("--test", type=int, default=200)
    g.add_argument("--background", type=int, default=2500)
    g.set_defaults(func=cmd_gen_corpus)

    g = sub.add_parser("train-lm", help="train a recurrent LM on token lines")
    g.add_argument("--text", required=True)
    g.add_argument("--vocab", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--steps", type=int, default=800)
    g.add_argument("--batch-size", type=int, default=16)
    g.add_argument("--lr", type=float, default=1e-3)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--embed-dim", type=int, default=32)
    g.add_argument("--hidden-dim", type=int, default=64)
    g.add_argument("--layers", type=int, default=2)
    g.add_argument("--verbose", action="store_true")
    g.set_defaults(func=cmd_train_lm)

    g = sub.add_parser("build-datastore",
                       help="embed prefixes and store continuations")
    g.add_argument("--lm", required=True)
    g.add_argument("--text", required=True)
    g.add_argument("--vocab", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--t", type=int, default=2)
    g.add_argument("--tag", default="")
    g.set_defaults(func=cmd_build_datastore)

    g = sub.add_parser("train-transducer", help="train the base recognizer")
    g.add_argument("--corpus", required=True)
    g.add_argument("--split", default="background")
    g.add_argument("--out", required=True)
    g.add_argument("--steps", type=int, default=5000)
    g.add_argument("--batch-size", type=int, default=16)
    g.add_argument("--lr", type=float, default=1e-3)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--verbose", action="store_true")
    g.set_defaults(func=cmd_train_transducer)

    g = sub.add_parser("train-adapter",
                       help="train a retrieval bias adapter")
    g.add_argument("--corpus", required=True)
    g.add_argument("--transducer", required=True)
    g.add_argument("--lm")
    g.add_argument("--datastore")
    g.add_argument("--out", required=True)
    g.add_argument("--side", choices=("encoder", "prediction"),
                   default="encoder")
    g.add_argument("--cand-encoder",
                   choices=("trained", "pretrained", "fixed"),
                   default="trained")
    g.add_argument("--steps", type=int, default=2000)
    g.add_argument("--batch-size", type=int, default=16)
    g.add_argument("--lr", type=float, default=1e-3)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--k", type=int, default=16)
    g.add_argument("--sample-k", action="store_true")
    g.add_argument("--noise-prob", type=float, default=0.1)
    g.add_argument("--ood-prob", type=float, default=0.5)
    g.add_argument("--verbose", action="store_true")
    g.set_defaults(func=cmd_train_adapter)

    g = sub.add_parser("decode", help="transcribe a corpus split")
    g.add_argument("--corpus", required=True)
    g.add_argument("--split", default="test")
    g.add_argument("--transducer", required=True)
    g.add_argument("--adapter")
    g.add_argument("--lm")
    g.add_argument("--datastore")
    g.add_argument("--k", type=int, default=16)
    g.add_argument("--retrieve-every", type=int, default=1)
    g.add_argument("--beam", type=int, default=0)
    g.add_argument("--fusion-lm")
    g.add_argument("--lambda", dest="lam", type=float, default=0.3)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_decode)

    g = sub.add_parser("eval", help="score hypotheses against references")
    g.add_argument("--ref", required=True)
    g.add_argument("--hyp", required=True)
    g.add_argument("--entities")
    g.set_defaults(func=cmd_eval)

    g = sub.add_parser("run-grid", help="decode and score a grid of configs")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_run_grid)

    g = sub.add_parser("reproduce",
                       help="full trend study with criterion report")
    g.add_argument("--out", required=True)
    g.add_argument("--mini", action="store_true")
    g.add_argument("--verbose", action="store_true")
    g.set_defaults(func=cmd_reproduce)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _log_config(args.command, args)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: missing-file: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except FormatError as exc:
        print(f"error: format: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except ValueError as exc:
        print(f"error: invalid-input: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
