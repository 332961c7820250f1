"""
Main entry point for the cross-modal hashing toolkit.

Subcommands:
- gen-data: synthetic planted-foreground image/text pairs
- train: alternating adversarial training
- encode / retrieve / eval: Hamming retrieval and MAP / PR evaluation
- gradcheck / mask-stats: verification and attention diagnostics
- sweep: code-length comparison
"""

import os
import sys

from config import settings

if __name__ == "__main__":
    # thread caps only take effect if set before numpy is loaded by the modules below
    for key, value in settings.thread_env.items():
        os.environ.setdefault(key, value)

    from cli import main

    sys.exit(main())
