import sys
from pathlib import Path

import torch

# Test-local helpers (oracles.py) live next to the tests.
sys.path.insert(0, str(Path(__file__).parent))

torch.set_num_threads(1)
