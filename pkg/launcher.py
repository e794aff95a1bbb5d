#!/usr/bin/env python3
"""
Launcher for the OED-OPF estimation toolkit.
Checks that the numerical dependencies import, then runs main.py with the
given arguments.
"""

import os
import sys
import subprocess


def check_dependencies():
    """Check if required dependencies are installed"""
    try:
        import numpy
        import scipy
        import pandas
        print("All dependencies are installed.")
        return True
    except ImportError as e:
        print(f"Missing dependency: {e}")

        response = input("Would you like to install missing dependencies? (y/n): ")
        if response.lower() in ['y', 'yes']:
            try:
                print("Installing dependencies...")
                subprocess.check_call([sys.executable, "-m", "pip", "install", "-r", "requirements.txt"])
                print("Dependencies installed successfully.")
                return True
            except Exception as e:
                print(f"Error installing dependencies: {e}")
                return False
        print("Cannot run without required dependencies.")
        return False


def launch_app(args):
    """Run main.py with the same interpreter"""
    script = os.path.join(os.path.dirname(os.path.abspath(__file__)), "main.py")
    try:
        return subprocess.call([sys.executable, script] + list(args))
    except Exception as e:
        print(f"Error launching application: {e}")
        return 1


if __name__ == "__main__":
    print("OED-OPF Launcher")
    print("================")

    if not check_dependencies():
        sys.exit(1)
    sys.exit(launch_app(sys.argv[1:]))
