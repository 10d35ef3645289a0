"""setuptools backend that ignores the setup.py bootstrap script.

setup.py in this project is a standalone installer script (see DESIGN.md),
not a setuptools configuration, so metadata comes from pyproject.toml only.
"""

from setuptools import build_meta as _orig
from setuptools import setup as _setup


class _Backend(_orig._BuildMetaBackend):
    def run_setup(self, setup_script="setup.py"):
        _setup()


_BACKEND = _Backend()
get_requires_for_build_wheel = _BACKEND.get_requires_for_build_wheel
get_requires_for_build_sdist = _BACKEND.get_requires_for_build_sdist
get_requires_for_build_editable = _BACKEND.get_requires_for_build_editable
prepare_metadata_for_build_wheel = _BACKEND.prepare_metadata_for_build_wheel
prepare_metadata_for_build_editable = _BACKEND.prepare_metadata_for_build_editable
build_wheel = _BACKEND.build_wheel
build_sdist = _BACKEND.build_sdist
build_editable = _BACKEND.build_editable
