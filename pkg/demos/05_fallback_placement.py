"""Two-pass heterogeneous placement with explicit copy nodes.

Pass one tags every node GPU if its op kind is on the known-good list,
CPU otherwise; pass two inserts a copy node on each device-crossing
edge. Outputs are bitwise identical no matter where operators land, so
falling back a GPU-unfriendly operator costs only the copies.
"""

import json

import numpy as np

from edgegraph.graph import DEFAULT_GPU_OPS, assign_devices, count_copies, insert_copies, load_graph, run_graph, topo_order
from edgegraph.tensor import Tensor

doc = json.dumps({
    "nodes": [
        {"id": "feat", "op": "conv2d", "attrs": {"pad": [1, 1]}, "inputs": ["data", "w"]},
        {"id": "act", "op": "relu", "attrs": {}, "inputs": ["feat"]},
        {"id": "stage", "op": "identity", "attrs": {}, "inputs": ["boxes"]},
        {"id": "nms", "op": "box_nms", "attrs": {"iou_threshold": 0.5, "score_threshold": 0.1}, "inputs": ["stage"]},
        {"id": "keepx", "op": "relu", "attrs": {}, "inputs": ["nms"]},
    ],
    "inputs": {
        "data": {"shape": [1, 2, 6, 6], "dtype": "f32"},
        "w": {"shape": [2, 2, 3, 3], "dtype": "f32"},
        "boxes": {"shape": [8, 6], "dtype": "f32"},
    },
    "outputs": ["act", "keepx"],
})

rng = np.random.default_rng(1)
boxes = np.zeros((8, 6), np.float32)
boxes[:, 0] = rng.integers(0, 2, 8)
boxes[:, 1] = rng.random(8)
boxes[:, 2] = rng.random(8) * 0.5
boxes[:, 3] = rng.random(8) * 0.5
boxes[:, 4] = boxes[:, 2] + 0.3
boxes[:, 5] = boxes[:, 3] + 0.3
inputs = {
    "data": Tensor.from_array(rng.standard_normal((1, 2, 6, 6)).astype(np.float32)),
    "w": Tensor.from_array(rng.standard_normal((2, 2, 3, 3)).astype(np.float32)),
    "boxes": Tensor.from_array(boxes),
}

g = load_graph(doc)
for name, gpu_ops in (("everything on GPU", DEFAULT_GPU_OPS),
                      ("box_nms falls back", DEFAULT_GPU_OPS - {"box_nms"})):
    placed = insert_copies(assign_devices(g, gpu_ops))
    outs = run_graph(placed, inputs)
    print(f"--- {name}: {count_copies(placed)} copy nodes")
    for node in topo_order(placed):
        marker = f"  {node.id:<16} {node.op:<12} {node.device}"
        print(marker + (f"  ({node.attrs['direction']})" if node.op == "copy" else ""))
    print("  keepx checksum:", float(outs["keepx"].data.sum()))
