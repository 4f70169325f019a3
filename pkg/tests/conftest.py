import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

from couplekit import data

# the evaluation-case dataclass is not a test class
data.TestCase.__test__ = False
