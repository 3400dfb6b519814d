"""Threat segmentation and detection for sequences of X-ray baggage scans."""
from .boxgen import DetectionBox, boxes_from_mask, box_iou, extract_instances
from .dataset import (DatasetSplit, ScanFrame, ScanSequence, generate_synthetic, load_corpus,
                      split_corpus)
from .fusion import FusedSample, fuse_corpus, fuse_sequence
from .metrics import ConfusionCounts, MetricsReport, compute_map, compute_miou, compute_prf
from .network import NetworkConfig, SegmentationNet, build_model, count_parameters, preset
from .training import TrainConfig, cross_entropy_loss, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"
