import os
import subprocess
import sys

MIN_PYTHON = (3, 9)


def check_python_version():
    """Stop early on interpreters older than the pinned numerical stack supports"""
    print(f"Python Version: {sys.version.split()[0]} ({sys.executable})")
    if sys.version_info < MIN_PYTHON:
        print(f"Python {MIN_PYTHON[0]}.{MIN_PYTHON[1]} or newer is required.")
        return False
    return True


def main():
    """Set up the measurement error variable selection project"""

    print("Setting up mepen...")
    if not check_python_version():
        return 1

    # Install Python dependencies
    print("\nInstalling Python dependencies...")
    try:
        subprocess.check_call([sys.executable, "-m", "pip", "install", "-r", "requirements.txt"])
    except subprocess.CalledProcessError:
        print("Failed to install Python dependencies")
        return 1

    root = os.path.dirname(os.path.abspath(__file__))
    env_file = os.path.join(root, ".env")
    if not os.path.exists(env_file):
        with open(os.path.join(root, ".env.example")) as src, open(env_file, "w") as dst:
            dst.write(src.read())
        print("\nCreated .env from .env.example")

    print("\nSetup completed successfully!")
    print("\nRun the tests with:  python -m pytest -m \"not slow\"")
    print("Try a small study:   python cli.py simulate --design example1 --n 200 --reps 2")

    return 0


if __name__ == "__main__":
    sys.exit(main())
