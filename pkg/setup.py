# msdpn/setup.py

from setuptools import setup, find_packages
import os

setup(
    name='msdpn',
    version='1.0.0',
    description='Multi-stage depth prediction from an image and a 2D LiDAR scan (MSDPN)',
    long_description=open('README.md').read() if os.path.exists('README.md') else '',
    long_description_content_type='text/markdown',
    packages=find_packages(where='src'),  # Tells setuptools to look for packages in the 'src' directory
    package_dir={'': 'src'},
    classifiers=[
        'Programming Language :: Python :: 3',
        'Operating System :: OS Independent',
        'Development Status :: 4 - Beta',
        'Intended Audience :: Science/Research',
        'Topic :: Scientific/Engineering :: Image Recognition',
    ],
    keywords=['depth-completion', 'lidar', 'camera', 'sensor-fusion', 'autodiff'],
    python_requires='>=3.8',
    install_requires=[
        'numpy>=1.20',
        'pandas>=1.5',
        'opencv-python-headless',
    ],
    extras_require={'test': ['pytest']},
    entry_points={'console_scripts': ['msdpn=msdpn.cli:main']},
)
