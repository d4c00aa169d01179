# Copyright (c) 2026, OccluPose contributors.  All rights reserved.
# SPDX-License-Identifier: GPL-2.0-or-later
from .cli import main

if __name__ == "__main__":
    main()
