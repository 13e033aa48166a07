from .base import *

# Long sweeps run unattended: keep the console quiet and the file log complete.
LOGGING['handlers']['console']['level'] = 'WARNING'
