#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Core Components - Основные компоненты
Tensor engine, errors, random streams and run configuration
"""
