"""
Django settings for the mipt_decoder project.

The project has no web surface: Django supplies configuration, logging,
the ORM for run manifests and the management-command CLI.

Every tunable below can be overridden from the environment or a .env file.
"""

from pathlib import Path
from decouple import config

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent.parent

SECRET_KEY = config('SECRET_KEY', default='mipt-decoder-local-only-key')

DEBUG = config('DEBUG', default=False, cast=bool)

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    'django.contrib.contenttypes',

    # Local apps
    'app.core',
    'app.trajectories',
    'app.neural',
    'app.classifier',
    'app.training',
    'app.evaluation',
    'app.runs',
]


# Database
DATABASES = {
    'default': {
        'ENGINE': config('DATABASE_ENGINE', default='django.db.backends.sqlite3'),
        'NAME': config('DATABASE_NAME', default=str(BASE_DIR / 'db.sqlite3')),
    }
}

# Cache Configuration
CACHES = {
    'default': {
        'BACKEND': 'django.core.cache.backends.locmem.LocMemCache',
        'LOCATION': 'mipt-decoder',
    }
}


# Simulation
MIPT_THREADS = config('MIPT_THREADS', default=1, cast=int)
MIPT_MAX_QUBITS = config('MIPT_MAX_QUBITS', default=24, cast=int)

MIPT_VERTICES = {
    'trivial': (0.85, 0.075, 0.075),
    'lr': (0.075, 0.85, 0.075),
    'spt': (0.075, 0.075, 0.85),
}


# Training
MIPT_TRAINING = {
    'lr': config('MIPT_LR', default=2e-5, cast=float),
    'epochs': config('MIPT_EPOCHS', default=30, cast=int),
    'set_size': config('MIPT_SET_SIZE', default=25, cast=int),
    'dropout_p': config('MIPT_DROPOUT', default=0.2, cast=float),
    'h1': config('MIPT_H1', default=8, cast=int),
    'h2': config('MIPT_H2', default=5, cast=int),
    'mlp_hidden': config('MIPT_MLP_HIDDEN', default=64, cast=int),
}

MIPT_ADAM = {
    'beta1': 0.9,
    'beta2': 0.999,
    'eps': 1e-8,
}

MIPT_NORM = {
    'bn_eps': 1e-5,
    'bn_momentum': 0.1,
    'ln_eps': 1e-5,
}


# Evaluation
MIPT_TEST_POINTS_FILE = config('MIPT_TEST_POINTS_FILE', default=str(BASE_DIR / 'data' / 'test_points.csv'))
MIPT_TEST_LABELS_FILE = config('MIPT_TEST_LABELS_FILE', default=str(BASE_DIR / 'data' / 'test_labels.csv'))

MIPT_ENSEMBLE = {
    'vote_models': 10,
    'diagram_models': 30,
    'repetitions': 10,
}

# the SPT vertex sits near 2 bits of TEE, the trivial and long-range vertices near 0
MIPT_LABEL_THRESHOLDS = {
    'tee': config('MIPT_LABEL_TEE', default=1.0, cast=float),
    'mi': config('MIPT_LABEL_MI', default=0.5, cast=float),
}

MIPT_ORACLE = {
    'L': config('MIPT_ORACLE_L', default=8, cast=int),
    'T': config('MIPT_ORACLE_T', default=48, cast=int),
    'n_traj': config('MIPT_ORACLE_TRAJECTORIES', default=200, cast=int),
    'seed': config('MIPT_ORACLE_SEED', default=0, cast=int),
}

MIPT_SWEEP_BREAKER = {
    'fail_max': config('MIPT_BREAKER_FAIL_MAX', default=5, cast=int),
    'reset_timeout': config('MIPT_BREAKER_RESET', default=60, cast=int),
}


# Internationalization
LANGUAGE_CODE = 'en-us'

TIME_ZONE = 'UTC'

USE_I18N = False

USE_TZ = True

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'

# Logging Configuration
LOG_DIR = Path(config('MIPT_LOG_DIR', default=str(BASE_DIR / 'logs')))
LOG_DIR.mkdir(parents=True, exist_ok=True)

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '{levelname} {asctime} {module} {process:d} {thread:d} {message}',
            'style': '{',
        },
    },
    'handlers': {
        'file': {
            'level': 'INFO',
            'class': 'logging.FileHandler',
            'filename': str(LOG_DIR / 'mipt.log'),
            'formatter': 'verbose',
        },
        'console': {
            'level': config('MIPT_CONSOLE_LOG_LEVEL', default='INFO'),
            'class': 'logging.StreamHandler',
            'formatter': 'verbose',
        },
    },
    'root': {
        'handlers': ['console', 'file'],
        'level': 'INFO',
    },
    'loggers': {
        'django': {
            'handlers': ['console', 'file'],
            'level': 'INFO',
            'propagate': False,
        },
        'app': {
            'handlers': ['console', 'file'],
            'level': 'DEBUG',
            'propagate': False,
        },
    },
}
