import pathlib
import sys

# allow running the suite without installing the package
_SRC = pathlib.Path(__file__).resolve().parent.parent / "src"
if str(_SRC) not in sys.path:
    try:
        import fednet  # noqa: F401
    except ImportError:
        sys.path.insert(0, str(_SRC))
