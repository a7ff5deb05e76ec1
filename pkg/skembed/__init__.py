# skembed: optimal Skorokhod embedding bounds under finitely many call prices
__version__ = '1.0.0'
