"""
Setup of lrsa python codebase
"""
from setuptools import setup

requirements = [
    'autolab_core',
    'ruamel.yaml<0.18',
    'numpy',
    'pyyaml',
    'matplotlib'
]

exec(open('lrsa/version.py').read())

setup(name='lrsa-lab',
      version=__version__,
      description='Lag-relative sparse attention: a condensed KV cache engine with chunked prefill, training and evaluation harness',
      license='MIT',
      keywords='attention kv-cache compression transformer',
      classifiers=[
          'Development Status :: 4 - Beta',
          'Programming Language :: Python',
          'Programming Language :: Python :: 3',
          'Natural Language :: English',
          'Topic :: Scientific/Engineering'
      ],
      packages=['lrsa', 'lrsa.model', 'lrsa.training', 'lrsa.utils'],
      install_requires=requirements,
      extras_require={'test': [
          'pytest',
          'scipy'
      ],
      },
      entry_points={'console_scripts': [
          'lrsa = lrsa.cli:main'
      ],
      }
)
