"""Detection post-processing: box_nms, multibox decoding, ROIAlign."""

import numpy as np

from edgegraph.vision import BoxSet, box_nms, multibox_detection, roi_align

# three overlapping boxes of one class, one of another
boxes = BoxSet(
    class_ids=[0, 0, 0, 1],
    scores=[0.9, 0.85, 0.3, 0.8],
    corners=[
        [0.10, 0.10, 0.50, 0.50],
        [0.12, 0.11, 0.52, 0.49],  # near-duplicate of the best box
        [0.60, 0.60, 0.90, 0.90],
        [0.11, 0.10, 0.51, 0.50],  # overlaps class 0 but is class 1
    ],
)
result = box_nms(boxes, iou_threshold=0.5, score_threshold=0.2)
print("NMS result rows (class, score, x1, y1, x2, y2); -1 rows are suppressed:")
print(result.to_array())

# SSD-style decoding: zero offsets reproduce the anchors
anchors = np.array([[[0.1, 0.1, 0.4, 0.4], [0.5, 0.5, 0.9, 0.9]]], np.float32)
probs = np.array([[[0.1, 0.2], [0.7, 0.1], [0.2, 0.7]]], np.float32)  # bg, cls0, cls1
locs = np.zeros((1, 8), np.float32)
dets = multibox_detection(probs, locs, anchors, score_threshold=0.3)[0]
print("\nmultibox detections (zero offsets decode back to the anchors):")
print(dets.to_array())

# ROIAlign: averaged bilinear samples over a region
features = np.arange(36, dtype=np.float32).reshape(1, 1, 6, 6)
pooled = roi_align(features, [[1.0, 1.0, 5.0, 5.0]], output_size=(2, 2), sampling_ratio=2)
print("\nROIAlign 2x2 pooling of rows 1..5 of a ramp feature map:")
print(pooled[0, 0])
