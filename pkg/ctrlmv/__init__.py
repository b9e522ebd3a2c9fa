# ctrlmv - continuous-time RL for mean-variance portfolio selection
# Copyright (C) 2025

__version__ = "0.1.0"
