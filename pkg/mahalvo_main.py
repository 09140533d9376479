# SPDX-FileCopyrightText: 2025-present Oori Data <info@oori.dev>
# SPDX-License-Identifier: Apache-2.0
# mahalvo_main.py
'''
Launcher for running from a source checkout once the package is installed (e.g. `pip install -e .`)

python mahalvo_main.py synth --profile loop --out-dir /tmp/seq_loop
python mahalvo_main.py slam /tmp/seq_loop --source tracks --out-dir /tmp/run_loop
'''
from mahalvo.cli import main

if __name__ == '__main__':
    main()
