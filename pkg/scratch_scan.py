"""Scratch config scanner (not part of the package)."""
import sys
import numpy as np
import aquila_fl as fl
from aquila_fl import problems


def probe(dim, cond, M, seed, alpha, beta, K, lo, hi, spread=1.0, label=""):
    cfg = fl.RunConfig(problem='quadratic', dim=dim, cond=cond, devices=M,
                       rounds=K, alpha=alpha, beta=beta, seed=seed)
    prob = problems.make_quadratic(dim, cond, M, seed, scale_lo=lo, scale_hi=hi,
                                   center_spread=spread)
    res = fl.run_experiment(cfg, problem=prob)
    post = res.reports[1:]
    skipR = sum(1 for rep in post if any(not r.uploaded for r in rep.records))
    allup = sum(1 for rep in post if all(r.uploaded for r in rep.records))
    allskip = sum(1 for rep in post if not any(r.uploaded for r in rep.records))
    levels = np.array([r.level for rep in post for r in rep.records])
    gap = None if res.final_loss is None else res.final_loss - res.f_star
    pl = res.certificates['pl_linear_rate']
    st = {n: res.certificates[n]['status'][:4] for n in
          ('descent', 'skip_energy', 'skip_deviation', 'pl_linear_rate')}
    print(f'{label} d={dim} cond={cond} a={alpha} b={beta} s={seed} sc=({lo},{hi}) cs={spread}: '
          f'skipR={skipR}/{len(post)} allup={allup} allskip={allskip} '
          f'lv={levels.mean():.2f} gmax={res.gamma_max:9.3g} '
          f'f*={res.f_star:8.3g} gap={gap:12.5g} {st}')
    return res


if __name__ == "__main__":
    mode = sys.argv[1] if len(sys.argv) > 1 else "c4"
    if mode == "c4":
        # criterion 4: alpha=0.1 beta=0.25 M=10 K=200 fixed; find skip-rich stable configs
        for seed in (0, 1, 2):
            for dim, cond in ((32, 4.0), (64, 4.0), (64, 10.0)):
                for lo, hi in ((0.5, 1.5), (0.2, 2.0)):
                    probe(dim, cond, 10, seed, 0.1, 0.25, 200, lo, hi)
    elif mode == "c5":
        # criterion 5: PL certificate; small alpha, mass skipping
        for seed in (0, 1):
            for alpha in (0.02, 0.05):
                for beta in (0.05, 0.1):
                    for dim, cond in ((16, 2.0), (64, 2.0)):
                        probe(dim, cond, 10, seed, alpha, beta, 300, 0.5, 1.5)
    elif mode == "c8":
        # criterion 8 benchmark: beta endpoints at alpha=0.1
        for seed in (0, 1):
            for dim, cond in ((64, 4.0), (128, 4.0)):
                for beta in (0.0, 0.1, 1.25):
                    probe(dim, cond, 10, seed, 0.1, beta, 200, 0.5, 1.5, 2.0)
