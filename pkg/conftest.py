import os

import django

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'moerlab.settings')
django.setup()
