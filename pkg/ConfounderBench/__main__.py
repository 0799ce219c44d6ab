import logging
import sys

from .application import Application
from .errors import BenchError

log = logging.getLogger(__name__)


def main(argv=None):
    app = Application(argv)
    try:
        app.check()
        app.run()
    except (BenchError, OSError) as e:
        log.debug('%s failed', app.command, exc_info=True)
        print('error: %s' % e, file=sys.stderr)
        return 1
    return 0


if __name__ == '__main__':
    sys.exit(main())
