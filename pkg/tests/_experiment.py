"""Desk-scale dialogue-advantage experiment: subprocess workers plus a tiny
scheduler, used by the acceptance suite.

The experiment trains the two-stage model for every dialogue-encoder variant
and seed on a freshly generated shapes corpus, then scores generated samples
with judges trained on a larger disjoint corpus. Each unit of work runs as a
child process pinned to one torch thread, so four workers saturate four cores
without oversubscription and without sharing torch state with the test
process; results travel through files.

The conditioning KL weight is 0 in this experiment (the package default is
2.0). With randomly initialized trainable encoders the weight's gradient
pulls (mu, log sigma) toward the prior with a consistent sign from step one,
while the discriminator needs several epochs before matched-versus-mismatched
conditions carry any reward; Adam's per-coordinate normalization makes that
pull advance at the full learning rate regardless of the weight's magnitude,
so the condition pathway is erased before matching pressure exists. Probed
down to weight 0.05 the embeddings still froze and the discriminator never
separated matched from mismatched pairs; at 0 the matching gap forms and
dialogue-only attributes become generatable. The nonzero default remains the
right choice when the text pathway starts from fixed pretrained features,
which a regularizer cannot erase.
"""
import json
import pickle
import subprocess
import sys
import time
from pathlib import Path

VARIANTS = ("recurrent", "flat", "none")
SEEDS = (0, 1, 2)
TRAIN_N, TRAIN_SEED = 2000, 101
TEST_N, TEST_SEED = 500, 202
JUDGE_N, JUDGE_SEED = 20000, 303
LAMBDA_KL = 0.0
RESOLUTIONS = (16, 32)


def run_all(argv_lists, max_workers, log_dir):
    """Run each argv as `python _experiment.py <argv...>`, at most
    max_workers at a time; raise on the first nonzero exit."""
    log_dir = Path(log_dir)
    log_dir.mkdir(parents=True, exist_ok=True)
    pending = [list(map(str, a)) for a in argv_lists]
    active = []
    try:
        while pending or active:
            while pending and len(active) < max_workers:
                args = pending.pop(0)
                log = log_dir / ("_".join(args).replace("/", "~") + ".log")
                with open(log, "w") as sink:
                    proc = subprocess.Popen([sys.executable, __file__, *args],
                                            stdout=sink, stderr=subprocess.STDOUT)
                active.append((args, log, proc))
            time.sleep(0.5)
            still = []
            for args, log, proc in active:
                rc = proc.poll()
                if rc is None:
                    still.append((args, log, proc))
                elif rc != 0:
                    raise RuntimeError(
                        f"worker {args} failed (exit {rc}):\n{log.read_text()}")
            active = still
    finally:
        for _, _, proc in active:
            if proc.poll() is None:
                proc.kill()


def _cmd_gen(root, name, n, seed):
    from chatpainter.scenes import generate_dataset

    generate_dataset(int(n), int(seed), RESOLUTIONS, Path(root) / name)


def _cmd_run(root, variant, seed, out_dir):
    import numpy as np
    import torch

    torch.set_num_threads(1)
    from chatpainter.corpus import load_dataset
    from chatpainter.training import Stage1Gan, Stage2Gan

    root, out = Path(root), Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train = load_dataset(root / "train")
    test = load_dataset(root / "test")
    t0 = time.monotonic()
    s1 = Stage1Gan(dialogue_encoder=variant, seed=int(seed), lambda_kl=LAMBDA_KL)
    s1.fit(train)
    t1 = time.monotonic()
    s2 = Stage2Gan(stage1=s1, dialogue_encoder=variant, seed=int(seed), lambda_kl=LAMBDA_KL)
    s2.fit(train)
    t2 = time.monotonic()
    images = s2.generate(test, seed=7).astype(np.float32)
    np.save(out / "images.npy", images)
    json.dump({"variant": variant, "seed": int(seed),
               "stage1_s": t1 - t0, "stage2_s": t2 - t1},
              open(out / "run.json", "w"))


def _cmd_proxy(root):
    import torch

    torch.set_num_threads(1)
    from chatpainter.corpus import load_dataset
    from chatpainter.evaluation import train_proxy_classifier

    root = Path(root)
    proxy = train_proxy_classifier(load_dataset(root / "judge"), 32, seed=0)
    (root / "proxy.pkl").write_bytes(pickle.dumps(proxy))


def _cmd_judge(root):
    import numpy as np
    import torch

    torch.set_num_threads(1)
    from chatpainter.corpus import load_dataset
    from chatpainter.evaluation import AttributeJudge

    root = Path(root)
    data = load_dataset(root / "judge")
    images = np.stack([s.image(32) for s in data])
    judge = AttributeJudge(seed=0).fit(images, [s.spec for s in data])
    (root / "judge.pkl").write_bytes(pickle.dumps(judge))


def main(argv):
    cmd, *rest = argv
    {"gen": _cmd_gen, "run": _cmd_run, "proxy": _cmd_proxy, "judge": _cmd_judge}[cmd](*rest)


if __name__ == "__main__":
    main(sys.argv[1:])
