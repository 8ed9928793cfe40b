from setuptools import setup, find_packages

setup(
    name             = 'wsi-domaingen',
    version          = __import__('wsidg').__version__,
    license          = 'GNU Lesser General Public License (LGPL), Version 3',
    python_requires  = '>=3.8',
    provides         = ['wsidg'],
    description      = 'Pseudo-domain contrastive learning for WSI tumor segmentation',
    packages         = find_packages(exclude=['tests', 'examples', 'examples.*']),
    install_requires = [
        'numpy>=1.21',
        'scikit-image>=0.19',
        'Pillow>=9.0',
        'torch>=1.13',
        'torchvision>=0.14',
        'scikit-learn>=1.0',
        'pandas>=1.3',
        'matplotlib>=3.5',
    ],
    entry_points     = {
        'console_scripts': ['wsidg = wsidg.cli:main'],
    },

    classifiers  = [
        'Development Status :: 3 - Alpha',
        'Environment :: Console',
        'Intended Audience :: Science/Research',
        'License :: OSI Approved :: GNU Library or Lesser General Public License (LGPL)',
        'Programming Language :: Python',
        'Topic :: Scientific/Engineering :: Image Recognition',
        'Topic :: Scientific/Engineering :: Medical Science Apps.',
    ],
)
