#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Dual Attention Backbone Lab - Main Entry Point
Лаборатория магистрали с двойным вниманием - Главная точка входа

Usage: python main.py <command> [options]   (see ``python main.py --help``)
"""

import sys
from pathlib import Path

# Add project root to Python path
project_root = Path(__file__).parent.absolute()
sys.path.insert(0, str(project_root))

from app.cli import main  # noqa: E402


if __name__ == "__main__":
    main()
