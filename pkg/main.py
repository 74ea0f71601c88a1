#!/usr/bin/env python3
"""
Spatial Knowledge Base - Entry Point

Builds hierarchical floor/room/area/object maps from recorded sequences and answers
natural-language object queries against them. See `python main.py --help`.
"""

import os
import sys

# Add current directory to Python path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

if __name__ == "__main__":
    from cli.main import main

    sys.exit(main())
