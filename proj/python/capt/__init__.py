"""Attribute-conditioned prompt tuning over frozen vision-language backbones."""

from capt._core import *  # noqa: F401,F403
from capt._core import __doc__ as _core_doc  # noqa: F401
