"""Where every feature point sits in the image, and how few crops cover it.

Run: python3 demos/geometry_and_tiling.py
"""

import numpy as np

from dnp.cnn import init_weights
from dnp.dense import network_convolution, plan_tiling
from dnp.geometry import geometry_table, paper_net, receptive_field_extent, tiny_net
from dnp.harness import bench_convolutions, format_bench_table


def main() -> None:
    net = paper_net()
    print("Per-layer pixel stride S and first center x (1-based):")
    for row in geometry_table(net):
        print(f"  {row.name:>6}: S={row.pixel_stride:>2}  x={row.top_left}  RF={row.receptive_field}")
    print(f"A conv5 point sees a {receptive_field_extent(net, 'conv5')}-pixel square.\n")

    plan = plan_tiling(640, 480, net, "conv5")
    print(
        f"640x480 image: {plan.n_crops} crops ({len(plan.x_tiles)}x{len(plan.y_tiles)}), "
        f"shift {plan.shift}px, grid {plan.cols}x{plan.rows} at stride {plan.stride}"
    )
    print(format_bench_table([bench_convolutions(640, 480, 2213, net, "conv5")]))

    # the tiny net runs in well under a second on a whole image
    small = tiny_net()
    image = np.random.default_rng(0).integers(0, 256, size=(240, 320, 3), dtype=np.uint8)
    grid = network_convolution(small, init_weights(small, 0), image, "conv3")
    print(
        f"\ntiny net conv3 on 320x240: {grid.cols}x{grid.rows} points of {grid.dim} values, "
        f"first at ({grid.x0}, {grid.y0}), stride {grid.stride}"
    )


if __name__ == "__main__":
    main()
