"""Train shape detectors on random-weight DNPs, HOG and both, then look at
the patterns the DNP detector relies on.

Takes about ten minutes on one CPU core.
Run: python3 demos/desk_detection.py [outdir]
"""

import logging
import sys
from pathlib import Path

from dnp.cnn import init_weights
from dnp.evaluation import average_precision
from dnp.geometry import tiny_net
from dnp.harness import (
    HOG,
    Experiment,
    FeatureExtractor,
    ProposalSpec,
    compute_grids,
    dnp_family,
    random_baseline,
    save_patterns,
    visualize_top_patterns,
)
from dnp.synthetic import generate_synthetic


def main(outdir: Path) -> None:
    logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")
    manifest = generate_synthetic(0, 250, n_test=50)
    net = tiny_net()
    layer = 4  # pool2: stride 8, 32 channels
    dnp = dnp_family(layer)
    fx = FeatureExtractor(net, init_weights(net, 0), layer, (dnp, HOG))
    grids = compute_grids(manifest, fx)

    base = average_precision(random_baseline(manifest, ProposalSpec()), manifest.ground_truth("test"))
    print(f"random scores: AP {base:.3f}")
    results = {}
    for families in [(dnp,), (HOG,), (dnp, HOG)]:
        cascade, _, _, ap = Experiment(families, pool_size=2000).run(manifest, grids, fx.dims())
        results[families] = (cascade, ap)
        print(f"{' + '.join(families):>20}: AP {ap:.3f}")

    cascade = results[(dnp,)][0]
    report = visualize_top_patterns(cascade, manifest, 16, net, grids, "test")
    index = save_patterns(report, outdir)
    fam, dim = report.top
    print(f"most used DNP dimension: {dim} ({report.histogram[report.top]} weaks); patches in {index.parent}")


if __name__ == "__main__":
    main(Path(sys.argv[1]) if len(sys.argv) > 1 else Path("demo_patterns"))
