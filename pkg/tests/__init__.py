"""Test suite for the segmentation benchmark harness

This package contains test modules for:
- Tensor primitives, architectures, training and metrics
- Slice, checkpoint and run-directory storage
- Benchmark, dataset and report controllers
- Command line exit codes, result tables and menu routing
- Config validation, random streams and logging

Test Configuration:
- Uses pytest framework
- Synthetic datasets written under tmp_path
- Tiny widths and 32x32 slices keep every training run short
"""

import os
import sys

# Add project root to Python path for imports
project_root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.insert(0, project_root)

# Test configuration
TINY_SHAPE = (32, 32)
TINY_WIDTH = 1.0 / 64.0
