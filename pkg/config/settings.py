import environ
from pathlib import Path
import os


env = environ.Env(
    DEBUG=(bool, False)
)

BASE_DIR = Path(__file__).resolve().parent.parent


environ.Env.read_env(env_file=os.path.join(BASE_DIR, '.env'))

# Nothing is signed or served; the key only satisfies Django's startup checks.
SECRET_KEY = env('SECRET_KEY', default='grounding-cli-insecure-key')
DEBUG = env('DEBUG')

ALLOWED_HOSTS = env.list('ALLOWED_HOSTS', default=[])

INSTALLED_APPS = [
    'rest_framework',
    'grounding',
]

MIDDLEWARE = []

# Datasets and checkpoints live on disk; no database is used.
DATABASES = {}

LANGUAGE_CODE = 'en-us'
TIME_ZONE = 'UTC'
USE_I18N = False
USE_TZ = True

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'

# ============================================================================
# GROUNDING SETTINGS
# ============================================================================

# Where commands write artifacts when --out is not given
GROUNDING_OUTPUT_DIR = Path(env('GROUNDING_OUTPUT_DIR', default=str(BASE_DIR / 'runs')))

# Seed used when neither the config file nor --seed provides one
GROUNDING_DEFAULT_SEED = env.int('GROUNDING_DEFAULT_SEED', default=0)

LOG_LEVEL = env('LOG_LEVEL', default='INFO').upper()

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '{asctime} {levelname} {name}: {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'verbose',
        },
    },
    'loggers': {
        'grounding': {
            'handlers': ['console'],
            'level': LOG_LEVEL,
            'propagate': False,
        },
    },
}
