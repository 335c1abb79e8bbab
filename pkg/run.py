"""
Quick start script for the modular prompt toolkit

    python run.py gen-tasks --out runs/suite
    python run.py pretrain --config configs/default.conf --out runs/pretrain
"""
import sys

from app.main import main

if __name__ == "__main__":
    sys.exit(main())
