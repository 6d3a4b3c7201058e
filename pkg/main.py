"""
Xtrapolation - Main Entry Point

Command-line entry point for computing extrapolation bounds, intervals,
scores and simulation studies. Run `python main.py --help` for the commands.
"""

from src.app import main

if __name__ == "__main__":
    main()
