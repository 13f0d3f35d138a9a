"""
DP-LDM Desk - differentially private latent diffusion at desk scale.
Layered like the rest of the toolkit:
- ui: command line, PDF report
- core: autodiff, models, DP-SGD, accountant, FID
- data: archives, ingestion, synthetic shapes
- utils: config, caching, helpers
"""

import logging
import sys

from dotenv import load_dotenv

load_dotenv()

from ui.cli import build_parser, dispatch, emit
from utils.errors import DPLDMError
from utils.helpers import setup_logging

logger = logging.getLogger("dpldm")


def main(argv=None) -> int:
    """Application entry point; returns the process exit code."""
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    try:
        emit(dispatch(args))
    except DPLDMError as e:
        logger.error("%s: %s", type(e).__name__, e)
        return e.exit_code
    except KeyboardInterrupt:
        logger.warning("interrupted")
        return 130
    return 0


if __name__ == "__main__":
    sys.exit(main())
