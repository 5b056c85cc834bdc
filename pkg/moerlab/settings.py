import os

# Build paths inside the project like this: os.path.join(BASE_DIR, ...)
BASE_DIR = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))

DEBUG = os.environ.get('DEBUG', 'False') == 'True'
SECRET_KEY = os.environ.get('SECRET_KEY', 'moerlab-offline-no-secret-needed')

INSTALLED_APPS = [
    'rest_framework',
    'experts',
]

# The lab keeps everything in files; no database
DATABASES = {}

# Serializers only; nothing is served
REST_FRAMEWORK = {
    'DEFAULT_AUTHENTICATION_CLASSES': [],
    'DEFAULT_PERMISSION_CLASSES': [],
    'UNAUTHENTICATED_USER': None,
}

USE_I18N = False
USE_TZ = True
TIME_ZONE = 'UTC'

# Output directory override; beats the config file, loses to --out
MOERLAB_OUT = os.environ.get('MOERLAB_OUT')

MOERLAB_LOG_LEVEL = os.environ.get('MOERLAB_LOG_LEVEL', 'WARNING').upper()

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'moerlab': {
            'format': '%(asctime)s %(levelname)s %(name)s: %(message)s',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'stream': 'ext://sys.stderr',
            'formatter': 'moerlab',
        },
    },
    'loggers': {
        'experts': {
            'handlers': ['console'],
            'level': MOERLAB_LOG_LEVEL,
            'propagate': False,
        },
    },
}

# Built-in experiment defaults; a --config JSON file overrides any of them
MOERLAB = {
    'output_dir': 'moerlab-out',
    'seed': 0,
    'workers': int(os.environ.get('MOERLAB_WORKERS', '1')),
    'model': {
        'num_layers': 8,
        'num_experts': 32,
        'k_base': 8,
        'd_model': 64,
        'd_expert': 128,
        'vocab_size': 256,
        'num_domains': 3,
        'max_seq_len': 64,
    },
    'plan': {
        'experts_per_domain': 2,
        'alpha': 4.0,
        'key_alpha': 2.0,
        'gamma': 10.0,
        'noise_scale': 1.0,
        'expert_noise': 0.02,
        'plant_keys': True,
    },
    'corpus': {
        'sequences_per_domain': 64,
        'seq_len': 12,
        'task_mode': True,
        'concentration': 0.9,
        'prompt_len': 8,
    },
    'calibration': {
        'top_m': 3,
        'min_mult': 2.0,
        'kl_top_n': 1000,
        'key_z': 2.0,
        'k_low': None,
        'min_ratio_samples': 100,
    },
    'policy': {
        'name': 'baseline',
        'strategy': 'D',
        'window_multiplier': 2,
        'bias_fraction': 0.2,
        'bias_space': 'score',
        'active_domains': None,
        'lambda': 0.7,
        'beta': 0.5,
        'k_min': 3,
        'tau': 0.8,
        'des_k_low': None,
        'odp_attention_z': 2.0,
        'fixed_k': None,
        'apply_prefill': True,
        'apply_decode': True,
    },
    'policies': ['baseline', 'pick-d', 'ban', 'banpick', 'dynamic-tau', 'des', 'odp'],
    'harness': {
        'batch_size': 64,
        'record_runtime': False,
        'write_traces': True,
    },
}
