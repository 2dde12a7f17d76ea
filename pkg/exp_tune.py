# Scratch tuning harness for the desk-scale reference config (not shipped).
import sys, time
import numpy as np
from raslab import corpus, microworld, acquisition, pipeline
from raslab.model import ModelConfig, StudentModel, build_vocab


def setup(world_seed=11, n_questions=500, n_options=4, n_attributes=8, variant="full"):
    world, records = microworld.gen_microworld(world_seed, n_questions, n_options, n_attributes)
    train, val, test = microworld.split_records(records)
    traces = [microworld.synth_trace(world, r) for r in train]
    v = pipeline.PipelineVariant(variant)
    ds = corpus.dedup(pipeline.build_variant_datasets(train, traces, v))
    texts = [e.input for st in (ds.recall, ds.analyze, ds.summarize) for e in st]
    texts += [e.label for st in (ds.recall, ds.analyze, ds.summarize) for e in st]
    vocab = build_vocab(texts, cap=512)
    return world, train, val, test, ds, vocab, v


def evaluate(m, recs, variant, max_new=24):
    return float(np.mean([pipeline.run_chain(m, r, variant, max_new_tokens=max_new).correct
                          for r in recs]))


def trial(seed=1, d=32, ff=128, heads=4, layers=2, lr=1e-3, epochs=10, interval=20,
          batch=32, variant="full", verbose=True, eval_every=0, setup_out=None):
    t0 = time.time()
    world, train, val, test, ds, vocab, v = setup_out or setup(variant=variant)
    cfg = ModelConfig(vocab_size=len(vocab), n_layers=layers, d_model=d, n_heads=heads,
                      d_ff=ff, max_len=160)
    model = StudentModel(cfg, vocab, seed=seed)
    scfg = acquisition.ScheduleConfig(interval=interval, epochs=epochs,
                                      batch_size=batch, lr=lr, seed=seed)
    accs = []
    def eval_fn(m):
        a = evaluate(m, val, v)
        accs.append(a)
        if verbose:
            print(f"    ep{len(accs)} val {a:.3f} t={time.time()-t0:.0f}s", flush=True)
        return a
    res = acquisition.run_acquisition(model, ds, scfg, eval_fn=eval_fn if eval_every else None)
    m = res.model
    stage_losses = {}
    for row in res.metrics[-res.metrics[-1]["step"] - 150:]:
        stage_losses.setdefault(row["stage"], []).append(row["loss"])
    late = {s: float(np.mean(l[-20:])) for s, l in stage_losses.items()}
    va = evaluate(m, val, v)
    ta = evaluate(m, test, v)
    print(f"variant={variant} seed={seed} d={d} lr={lr} ep={epochs} "
          f"late_losses={ {k: round(x,3) for k,x in late.items()} } val={va:.3f} test={ta:.3f} "
          f"t={time.time()-t0:.0f}s", flush=True)
    return res, va, ta


if __name__ == "__main__":
    kwargs = {}
    for arg in sys.argv[1:]:
        k, _, val = arg.partition("=")
        kwargs[k] = val if k == "variant" else (float(val) if "." in val or "e-" in val else int(val))
    trial(**kwargs)
