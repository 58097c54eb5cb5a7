#!/usr/bin/env python3
"""
joulebench - energy benchmarking for generative model serving
"""

import sys

import cli
from profiles import ProfileCache


def main():
    ProfileCache.load()
    sys.exit(cli.main())


if __name__ == '__main__':
    main()
