import mpmath as mp
mp.mp.dps=40
def stats(p,b):
    n=len(p); S=sum(p); mu=S/2; sig=mp.sqrt(sum(q*q for q in p)/6+S*S/12)
    t=(mu+b)/sig; return mu,sig,t,mp.ncdf(t)
p=[mp.mpf(-1),mp.mpf(4),mp.mpf(-3)]; b=mp.mpf(-1)
mu,sig,t,P=stats(p,b); print('mu',mu,'sig',sig,'t',t,'Phi',P)
print('alpha',[P*(q+b/3) for q in p],'sa',P*(sum(p)+b))
phi=mp.npdf(t); g=[phi*(q+b/3) for q in p]
print('d_b shaplu', P+sum(g)/sig)
w=[mp.mpf(1),mp.mpf(2),mp.mpf(3)]; x=[mp.mpf(-1),mp.mpf(2),mp.mpf(-1)]
br=[1/(2*sig)-(mu+b)*(q+mu)/(6*sig**3) for q in p]
print('dx corr', [P*w[k]+g[k]*w[k]*br[k] for k in range(3)])
print('dw corr', [P*x[k]+g[k]*x[k]*br[k] for k in range(3)])
print('dx nocorr', [P*w[k] for k in range(3)])
# SA exact grads via mp.diff
def sa(pp,bb):
    mu,sig,t,P=stats(pp,bb); return P*(sum(pp)+bb)
def sa_wx(ws,xs,bb): return sa([ws[i]*xs[i] for i in range(3)],bb)
print('sa dx',[mp.diff(lambda v: sa_wx(w,x[:k]+[v]+x[k+1:],b), x[k]) for k in range(3)])
print('sa dw',[mp.diff(lambda v: sa_wx(w[:k]+[v]+w[k+1:],x,b), w[k]) for k in range(3)])
print('sa db',mp.diff(lambda v: sa(p,v), b))
print('sa(10)', sa([mp.mpf(10)],0), 'sa(2)', sa([mp.mpf(2)],0), 'Phi1', mp.ncdf(1), mp.ncdf(-1))
